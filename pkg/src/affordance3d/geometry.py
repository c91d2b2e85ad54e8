"""Point clouds, pinhole cameras, point splatting and patch grouping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import InvalidInput

SPLAT_RADIUS = 1.5
RING_ELEVATION = 20.0
RING_RADIUS = 2.2
RESOLUTION = (224, 224)
FOV_DEGREES = 60.0


@dataclass
class PointCloud:
    points: np.ndarray
    part_labels: np.ndarray | None = None
    heatmaps: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidInput(f"points must be N x 3, got {self.points.shape}")
        n = len(self.points)
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
            if self.part_labels.shape != (n,):
                raise InvalidInput("part_labels must have one entry per point")
        for key, h in list(self.heatmaps.items()):
            h = np.asarray(h, dtype=np.float64)
            if h.shape != (n,):
                raise InvalidInput(f"heatmap {key!r} must have one entry per point")
            if h.size and (h.min() < 0.0 or h.max() > 1.0):
                raise InvalidInput(f"heatmap {key!r} values must lie in [0, 1]")
            self.heatmaps[key] = h

    def __len__(self):
        return len(self.points)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return PointCloud(
            self.points[perm],
            None if self.part_labels is None else self.part_labels[perm],
            {k: h[perm] for k, h in self.heatmaps.items()},
        )


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    if len(cloud) == 0:
        raise InvalidInput("cannot normalize an empty cloud")
    centered = cloud.points - cloud.points.mean(axis=0)
    scale = np.sqrt((centered * centered).sum(axis=1)).max()
    if scale > 0:
        centered = centered / scale
    return replace(cloud, points=centered, heatmaps=dict(cloud.heatmaps))


@dataclass(frozen=True)
class Camera:
    extrinsic: np.ndarray  # 4x4 world -> camera
    focal: float
    principal: tuple[float, float]  # (cx, cy) in pixels, x = column
    resolution: tuple[int, int]  # (H, W)

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        if ext.shape != (4, 4):
            raise InvalidInput("extrinsic must be 4 x 4")
        rot = ext[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise InvalidInput("extrinsic rotation must be orthonormal with det +1")
        if not self.focal > 0:
            raise InvalidInput("focal length must be positive")
        if min(self.resolution) <= 0:
            raise InvalidInput("resolution must be positive")
        object.__setattr__(self, "extrinsic", ext)

    @property
    def position(self):
        rot, t = self.extrinsic[:3, :3], self.extrinsic[:3, 3]
        return -rot.T @ t

    @property
    def forward(self):
        return self.extrinsic[2, :3].copy()

    def to_camera(self, points):
        return points @ self.extrinsic[:3, :3].T + self.extrinsic[:3, 3]


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """World-to-camera transform, camera axes x=right, y=down, z=forward."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        raise InvalidInput("view direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ position
    return ext


def camera_ring(
    V: int = 12,
    elevation: float = RING_ELEVATION,
    radius: float = RING_RADIUS,
    resolution: tuple[int, int] = RESOLUTION,
    fov: float = FOV_DEGREES,
) -> list[Camera]:
    """``V`` cameras on a ring around the y axis, all looking at the origin.

    Azimuth 0 sits on the +z axis; azimuth steps are 360/V degrees.
    """
    if V < 1:
        raise InvalidInput("need at least one view")
    if radius <= 1:
        raise InvalidInput("camera radius must exceed 1 (unit-sphere clouds)")
    if abs(elevation) >= 90:
        raise InvalidInput("elevation must lie strictly between -90 and 90 degrees")
    h, w = resolution
    focal = 0.5 * min(h, w) / math.tan(math.radians(fov) / 2)
    el = math.radians(elevation)
    cams = []
    for i in range(V):
        az = math.radians(360.0 * i / V)
        pos = radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        cams.append(Camera(look_at(pos), focal, (w / 2.0, h / 2.0), (h, w)))
    return cams


@dataclass
class ViewProjection:
    point_pixel: np.ndarray  # N x 2 (row, col); (-1, -1) off-screen
    visible: np.ndarray  # N bool
    depth: np.ndarray  # H x W, inf = background
    part_id_buffer: np.ndarray  # H x W, -1 = background
    winner: np.ndarray  # H x W point index, -1 = background
    uv: np.ndarray  # N x 2 continuous (col, row)
    point_depth: np.ndarray  # N camera-space z


def project_points(cloud: PointCloud, camera: Camera, splat_radius: float = SPLAT_RADIUS, backend=None) -> ViewProjection:
    """Pinhole projection plus z-buffer splatting of ``cloud`` into ``camera``.

    A point is visible when it wins at least one pixel. For visible points
    ``point_pixel`` is the won pixel closest to the projection, so sampling a
    per-pixel map there always reads a pixel owned by that point. Other
    points get their projected pixel when it is on screen.
    """
    h, w = camera.resolution
    pc = camera.to_camera(cloud.points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal * pc[:, 0] / z + camera.principal[0]
        v = camera.focal * pc[:, 1] / z + camera.principal[1]
    behind = ~(z > 1e-6)
    u[behind] = np.nan
    v[behind] = np.nan
    depth, winner, rep = kernels.splat(u, v, z, h, w, splat_radius, backend=backend)
    visible = rep[:, 0] >= 0
    pixel = rep.copy()
    with np.errstate(invalid="ignore"):
        col = np.floor(u)
        row = np.floor(v)
        onscreen = (~visible) & ~behind & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    pixel[onscreen, 0] = row[onscreen].astype(np.int64)
    pixel[onscreen, 1] = col[onscreen].astype(np.int64)
    labels = cloud.part_labels if cloud.part_labels is not None else np.zeros(len(cloud), dtype=np.int64)
    part_buf = np.where(winner >= 0, labels[np.maximum(winner, 0)], -1)
    return ViewProjection(pixel, visible, depth, part_buf, winner, np.stack([u, v], axis=1), z)


def farthest_point_sample(cloud, M: int, start_index: int = 0, backend=None) -> np.ndarray:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    n = len(points)
    if M > n:
        raise InvalidInput(f"cannot sample {M} of {n} points")
    if M < 1:
        raise InvalidInput("M must be positive")
    if not 0 <= start_index < n:
        raise InvalidInput("start_index out of range")
    return kernels.fps(points, M, start_index, backend=backend)


@dataclass
class PatchSet:
    center_indices: np.ndarray  # M
    centers: np.ndarray  # M x 3
    member_indices: np.ndarray  # M x k

    @property
    def M(self):
        return len(self.centers)

    @property
    def k(self):
        return self.member_indices.shape[1]


def knn_group(cloud, centers, k: int, backend=None) -> PatchSet:
    """Group the ``k`` nearest points (ties -> lower index) around each center index."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if k > len(points):
        raise InvalidInput(f"k={k} exceeds the {len(points)} points")
    if k < 1:
        raise InvalidInput("k must be positive")
    centers = np.asarray(centers, dtype=np.int64)
    idx, _ = kernels.knn(points, points[centers], k, backend=backend)
    # a duplicate of the center could outrank it on a lower index; keep the center itself
    missing = ~(idx == centers[:, None]).any(axis=1)
    idx[missing, -1] = centers[missing]
    return PatchSet(centers, points[centers].copy(), idx)


def make_patches(cloud, M: int, k: int, start_index: int = 0, backend=None) -> PatchSet:
    return knn_group(cloud, farthest_point_sample(cloud, M, start_index, backend=backend), k, backend=backend)
