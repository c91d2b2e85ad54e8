"""Stage 1: encode rendered views with a 2D teacher and lift features onto points."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from . import kernels
from .errors import InvalidInput, LiftingFailed
from .geometry import Camera, PointCloud, ViewProjection, project_points
from .io import load_arrays, read_header, save_arrays


@runtime_checkable
class TeacherEncoder(Protocol):
    name: str
    feature_dim: int

    def encode(self, view: ViewProjection) -> tuple[np.ndarray, int]:
        """Return an ``H' x W' x feature_dim`` map and its pixel stride."""
        ...


class ProceduralTeacher:
    """Deterministic stand-in for a frozen vision foundation model.

    Every pixel is mapped to a fixed random unit vector keyed by the part id
    rendered there, so lifted features carry exact part identity. Background
    pixels map to zero. ``noise_scale`` adds seeded Gaussian noise to
    foreground cells, derived from the view content so repeated calls agree.
    """

    name = "procedural"

    def __init__(self, feature_dim: int = 32, num_parts: int = 16, noise_scale: float = 0.0, seed: int = 0, stride: int = 1):
        if num_parts > feature_dim:
            raise InvalidInput("orthonormal part embeddings need feature_dim >= num_parts")
        if noise_scale < 0:
            raise InvalidInput("noise_scale must be >= 0")
        if stride < 1:
            raise InvalidInput("stride must be >= 1")
        self.feature_dim = feature_dim
        self.num_parts = num_parts
        self.noise_scale = noise_scale
        self.seed = seed
        self.stride = stride
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((feature_dim, num_parts)))
        self.part_embedding_table = np.ascontiguousarray(q.T)  # num_parts x d, orthonormal rows

    def embed_parts(self, part_ids):
        part_ids = np.asarray(part_ids)
        out = np.zeros(part_ids.shape + (self.feature_dim,))
        fg = part_ids >= 0
        if np.any(part_ids[fg] >= self.num_parts):
            raise InvalidInput("part id outside the embedding table")
        out[fg] = self.part_embedding_table[part_ids[fg]]
        return out

    def encode(self, view) -> tuple[np.ndarray, int]:
        buf = view.part_id_buffer if hasattr(view, "part_id_buffer") else np.asarray(view)
        s = self.stride
        ids = buf[s // 2 :: s, s // 2 :: s]
        fmap = self.embed_parts(ids)
        if self.noise_scale > 0:
            key = zlib.crc32(np.ascontiguousarray(ids, dtype=np.int64).tobytes())
            rng = np.random.default_rng([self.seed, key])
            noise = rng.standard_normal(fmap.shape) * self.noise_scale
            fmap += noise * (ids >= 0)[..., None]
        return fmap, s

    def encode_exemplar(self, part_id_buffer) -> np.ndarray:
        """Pool the feature map over the exemplar's foreground (highlighted) pixels."""
        fmap, _ = self.encode(np.asarray(part_id_buffer))
        s = self.stride
        fg = np.asarray(part_id_buffer)[s // 2 :: s, s // 2 :: s] >= 0
        if not fg.any():
            raise InvalidInput("exemplar has no foreground pixels")
        return fmap[fg].mean(axis=0)


class RealVFMAdapter:
    """Interface slot for a real foundation-model teacher (image in, feature grid out).

    Bundling checkpoints is out of scope; subclass and implement
    :meth:`encode_image` to plug one in.
    """

    name = "vfm"

    def __init__(self, feature_dim: int, stride: int = 16):
        self.feature_dim = feature_dim
        self.stride = stride

    def encode_image(self, rgb: np.ndarray) -> np.ndarray:
        raise NotImplementedError("no foundation-model weights are bundled")

    def encode(self, view) -> tuple[np.ndarray, int]:
        rgb = getattr(view, "rgb", None)
        if rgb is None:
            raise NotImplementedError("this adapter needs shaded RGB renders")
        return self.encode_image(rgb), self.stride


@dataclass
class LiftedFeatureSet:
    features: np.ndarray  # N x d
    visibility_count: np.ndarray  # N
    fallback: np.ndarray  # N bool, filled from nearest visible neighbour
    header: dict

    @property
    def feature_dim(self):
        return self.features.shape[1]


def lift_features(cloud: PointCloud, cameras: list[Camera], teacher: TeacherEncoder, splat_radius: float = 1.5) -> LiftedFeatureSet:
    """Average the teacher feature sampled at each point's pixel over all views seeing it.

    Feature-map sampling is nearest-cell. Points seen by no view copy the
    feature of their nearest visible neighbour and are flagged.
    """
    if not cameras:
        raise InvalidInput("need at least one camera")
    n = len(cloud)
    acc = np.zeros((n, teacher.feature_dim))
    count = np.zeros(n, dtype=np.int64)
    for cam in cameras:  # fixed camera order -> fixed reduction order
        proj = project_points(cloud, cam, splat_radius)
        fmap, stride = teacher.encode(proj)
        if fmap.shape[-1] != teacher.feature_dim:
            raise InvalidInput("teacher returned the wrong feature dimension")
        vis = np.nonzero(proj.visible)[0]
        rows = np.minimum(proj.point_pixel[vis, 0] // stride, fmap.shape[0] - 1)
        cols = np.minimum(proj.point_pixel[vis, 1] // stride, fmap.shape[1] - 1)
        acc[vis] += fmap[rows, cols]
        count[vis] += 1
    seen = count > 0
    if not seen.any():
        raise LiftingFailed("no point is visible in any view")
    feats = np.zeros_like(acc)
    feats[seen] = acc[seen] / count[seen, None]
    fallback = ~seen
    if fallback.any():
        src = np.nonzero(seen)[0]
        nn_idx, _ = kernels.knn(cloud.points[src], cloud.points[fallback], 1)
        feats[fallback] = feats[src[nn_idx[:, 0]]]
    header = {
        "teacher": teacher.name,
        "d_2d": int(teacher.feature_dim),
        "views": len(cameras),
        "seed": int(getattr(teacher, "seed", 0)),
    }
    return LiftedFeatureSet(feats, count, fallback, header)


def save_lifted(path, lifted: LiftedFeatureSet):
    save_arrays(
        path,
        {
            "features": lifted.features.astype(np.float32),
            "visibility_count": lifted.visibility_count.astype(np.int32),
            "fallback": lifted.fallback,
        },
        header=lifted.header,
    )


def load_lifted(path) -> LiftedFeatureSet:
    arrays = load_arrays(path)
    count = arrays["visibility_count"].astype(np.int64)
    fallback = arrays["fallback"] if "fallback" in arrays else count == 0
    return LiftedFeatureSet(arrays["features"].astype(np.float64), count, fallback, read_header(arrays))


def pca_components(features, n_components=3):
    """Mean-centered PCA. Returns ``(projections, components, eigenvalues)``.

    Components are sign-fixed so the largest-magnitude loading is positive.
    Eigenvalues are those of the biased (1/N) covariance, descending.
    """
    x = np.asarray(features, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    signs = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    comps = vt[:n_components]
    return xc @ comps.T, comps, s**2 / len(x)


def pca_to_rgb(features, rank_tol=1e-9) -> np.ndarray:
    """Top-3 principal components, each min-max rescaled to [0, 1].

    Channels beyond the feature matrix rank are filled with 0.5.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 3:
        raise InvalidInput("pca_to_rgb needs at least 3 rows and 3 feature dims")
    proj, _, eig = pca_components(x, 3)
    rgb = np.full((len(x), 3), 0.5)
    scale = max(eig[0], 1.0) if eig.size else 1.0
    for c in range(min(3, proj.shape[1])):
        if eig[c] <= rank_tol * scale:
            continue
        lo, hi = proj[:, c].min(), proj[:, c].max()
        if hi > lo:
            rgb[:, c] = (proj[:, c] - lo) / (hi - lo)
    return rgb
