import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from affordance3d.errors import InvalidInput
from affordance3d.geometry import (
    Camera,
    PointCloud,
    camera_ring,
    farthest_point_sample,
    knn_group,
    look_at,
    make_patches,
    normalize_cloud,
    project_points,
)

finite = st.floats(-10, 10, allow_nan=False, width=64)
clouds = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=finite)


def sphere(n, seed=0):
    p = np.random.default_rng(seed).standard_normal((n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


# normalize_cloud


def test_normalize_two_points():
    out = normalize_cloud(PointCloud(np.array([[2.0, 0, 0], [0, 0, 0]])))
    np.testing.assert_allclose(out.points, [[1, 0, 0], [-1, 0, 0]])


def test_normalize_carries_labels_and_heatmaps():
    c = PointCloud(np.random.default_rng(0).random((5, 3)), np.arange(5), {"grasp": np.linspace(0, 1, 5)})
    out = normalize_cloud(c)
    np.testing.assert_array_equal(out.part_labels, c.part_labels)
    np.testing.assert_array_equal(out.heatmaps["grasp"], c.heatmaps["grasp"])


def test_normalize_empty_raises():
    with pytest.raises(InvalidInput):
        normalize_cloud(PointCloud(np.zeros((0, 3))))


def test_normalize_random_invariants():
    p = np.random.default_rng(4).normal(3.0, 2.0, (100, 3))
    out = normalize_cloud(PointCloud(p)).points
    centroid = [sum(out[i, j] for i in range(100)) / 100 for j in range(3)]
    assert max(abs(c) for c in centroid) < 1e-6
    assert abs(max(float(np.sqrt(x * x + y * y + z * z)) for x, y, z in out) - 1) < 1e-6


@settings(max_examples=60, deadline=None)
@given(clouds)
def test_normalize_idempotent(pts):
    if np.ptp(pts, axis=0).max() < 1e-3:
        return  # near-coincident points: scale undefined
    once = normalize_cloud(PointCloud(pts))
    twice = normalize_cloud(once)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-6)


def test_heatmap_out_of_range_rejected():
    with pytest.raises(InvalidInput):
        PointCloud(np.zeros((2, 3)), heatmaps={"x": np.array([0.0, 1.5])})


# cameras


def test_ring_azimuths_twelve():
    cams = camera_ring(12)
    az = [np.degrees(np.arctan2(c.position[0], c.position[2])) % 360 for c in cams]
    np.testing.assert_allclose(az, np.arange(0, 360, 30), atol=1e-9)
    for c in cams:
        assert abs(c.position[1] - 2.2 * np.sin(np.radians(20))) < 1e-12
        assert abs(np.linalg.norm(c.position) - 2.2) < 1e-12


def test_single_camera_looks_through_origin():
    (cam,) = camera_ring(1)
    pos = cam.position
    # origin lies on the optical axis
    cross = np.cross(cam.forward, -pos)
    assert np.linalg.norm(cross) < 1e-12
    assert np.dot(cam.forward, -pos) > 0


@pytest.mark.parametrize("elev", [-60.0, 0.0, 20.0, 45.0])
def test_four_view_ring_is_square(elev):
    p = np.array([c.position for c in camera_ring(4, elevation=elev)])
    side = [np.linalg.norm(p[i] - p[(i + 1) % 4]) for i in range(4)]
    diag = [np.linalg.norm(p[0] - p[2]), np.linalg.norm(p[1] - p[3])]
    np.testing.assert_allclose(side, side[0], rtol=1e-12)
    np.testing.assert_allclose(diag, side[0] * np.sqrt(2), rtol=1e-12)


@pytest.mark.parametrize("kw", [dict(radius=1.0), dict(radius=0.5), dict(V=0), dict(elevation=90)])
def test_ring_rejects_bad_arguments(kw):
    args = dict(V=4) | kw
    with pytest.raises(InvalidInput):
        camera_ring(**args)


def test_camera_rejects_non_rotation():
    ext = np.eye(4)
    ext[0, 0] = -1  # reflection, det = -1
    with pytest.raises(InvalidInput):
        Camera(ext, 100.0, (10.0, 10.0), (20, 20))
    with pytest.raises(InvalidInput):
        Camera(np.eye(4), 0.0, (10.0, 10.0), (20, 20))


def test_camera_rotation_orthonormal():
    for cam in camera_ring(7, elevation=-35):
        R = cam.extrinsic[:3, :3]
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1) < 1e-12


# projection


def axis_camera(res=(64, 64)):
    ext = look_at(np.array([0.0, 0.0, 2.2]))
    return Camera(ext, 50.0, (res[1] / 2, res[0] / 2), res)


def test_origin_projects_to_principal_point():
    cam = axis_camera()
    proj = project_points(PointCloud(np.zeros((1, 3))), cam)
    assert proj.visible[0]
    np.testing.assert_allclose(proj.uv[0], [32.0, 32.0])
    assert tuple(proj.point_pixel[0]) in {(31, 31), (31, 32), (32, 31), (32, 32)}


def test_nearer_point_occludes():
    cam = axis_camera()
    # camera at z=2.2: depths 2 and 3
    pts = np.array([[0, 0, -0.8], [0, 0, 0.2]])
    proj = project_points(PointCloud(pts, np.array([3, 5])), cam)
    assert proj.visible.tolist() == [False, True]
    r, c = proj.point_pixel[1]
    assert proj.part_id_buffer[r, c] == 5
    assert abs(proj.depth[r, c] - 2.0) < 1e-12


def test_behind_camera_is_offscreen():
    cam = axis_camera()
    proj = project_points(PointCloud(np.array([[0, 0, 3.0]])), cam)
    assert not proj.visible[0]
    assert tuple(proj.point_pixel[0]) == (-1, -1)


def test_sphere_fully_covered_by_ring():
    cloud = PointCloud(sphere(500))
    seen = np.zeros(500, bool)
    for cam in camera_ring(12):
        seen |= project_points(cloud, cam).visible
    assert seen.all()


def test_visible_points_in_bounds_and_depth_minimal():
    cloud = PointCloud(sphere(800, 2))
    cam = camera_ring(3)[1]
    proj = project_points(cloud, cam)
    H, W = cam.resolution
    pix = proj.point_pixel[proj.visible]
    assert ((pix >= 0) & (pix < [H, W])).all()
    # winners carry the recorded depth, and nobody covering that pixel is nearer
    rows, cols = np.nonzero(proj.winner >= 0)
    win = proj.winner[rows, cols]
    np.testing.assert_array_equal(proj.depth[rows, cols], proj.point_depth[win])
    cover = ((proj.uv[:, None, 0] - (cols + 0.5)) ** 2 + (proj.uv[:, None, 1] - (rows + 0.5)) ** 2) <= 1.5**2
    nearer = cover & (proj.point_depth[:, None] < proj.depth[rows, cols][None, :])
    assert not nearer.any()


def test_projection_permutation_equivariant():
    pts = sphere(300, 5)
    perm = np.random.default_rng(0).permutation(300)
    cam = camera_ring(5)[2]
    a = project_points(PointCloud(pts), cam)
    b = project_points(PointCloud(pts[perm]), cam)
    np.testing.assert_array_equal(a.depth, b.depth)
    # visibility may differ only at exact depth ties, none here
    np.testing.assert_array_equal(a.visible[perm], b.visible)


# farthest point sampling


def test_fps_small_example():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0.1, 0, 0]])
    assert farthest_point_sample(PointCloud(pts), 2, 0).tolist() == [0, 1]


def test_fps_all_points():
    pts = sphere(20)
    idx = farthest_point_sample(PointCloud(pts), 20, 3)
    assert idx[0] == 3 and sorted(idx.tolist()) == list(range(20))


def test_fps_rejects_oversample():
    with pytest.raises(InvalidInput):
        farthest_point_sample(PointCloud(sphere(4)), 5)


def _min_pair(p):
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    return d[np.triu_indices(len(p), 1)].min()


def test_fps_greedy_half_approximation_vs_exhaustive():
    pts = np.random.default_rng(11).random((12, 3))
    m = 4
    picked = farthest_point_sample(PointCloud(pts), m, 0)
    best = max(_min_pair(pts[list(s)]) for s in itertools.combinations(range(12), m))
    got = _min_pair(pts[picked])
    # greedy max-min is a 2-approximation of the optimal dispersion
    assert got >= best / 2 - 1e-12


def test_fps_greedy_rule_each_step():
    pts = np.random.default_rng(7).random((64, 3))
    idx = farthest_point_sample(PointCloud(pts), 8, 5)
    for t in range(1, 8):
        d = np.linalg.norm(pts[:, None] - pts[idx[:t]][None], axis=-1).min(axis=1)
        assert idx[t] == int(np.argmax(d))


@settings(max_examples=40, deadline=None)
@given(clouds, st.integers(0, 1000))
def test_fps_deterministic(pts, start):
    start %= len(pts)
    m = max(1, len(pts) // 2)
    a = farthest_point_sample(PointCloud(pts), m, start)
    b = farthest_point_sample(PointCloud(pts.copy()), m, start)
    np.testing.assert_array_equal(a, b)
    assert a[0] == start


# kNN grouping


def test_knn_k1_is_center():
    pts = sphere(30)
    ps = knn_group(PointCloud(pts), np.array([0, 7, 9]), 1)
    assert ps.member_indices.ravel().tolist() == [0, 7, 9]


def test_knn_collinear():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 0, 0]])
    ps = knn_group(PointCloud(pts), np.array([1]), 3)
    assert sorted(ps.member_indices[0].tolist()) == [0, 1, 2]


def test_knn_rejects_large_k():
    with pytest.raises(InvalidInput):
        knn_group(PointCloud(sphere(5)), np.array([0]), 6)


def test_knn_members_closer_than_non_members():
    pts = np.random.default_rng(2).random((120, 3))
    ps = knn_group(PointCloud(pts), np.array([3, 50, 99]), 9)
    for j, c in enumerate([3, 50, 99]):
        d = np.linalg.norm(pts - pts[c], axis=1)
        inside = np.zeros(120, bool)
        inside[ps.member_indices[j]] = True
        assert ps.member_indices.shape == (3, 9)
        assert d[inside].max() <= d[~inside].min()
        assert c in ps.member_indices[j]


@pytest.mark.xfail(
    strict=True,
    reason="M*k = 64*32 = N, so full cover needs disjoint kNN patches; FPS+kNN leaves ~15% uncovered",
)
def test_patch_cover_at_full_scale():
    cloud = PointCloud(sphere(2048))
    ps = make_patches(cloud, 64, 32)
    assert np.unique(ps.member_indices).size == len(cloud)


def test_patch_cover_with_double_group_size():
    cloud = PointCloud(sphere(2048))
    ps = make_patches(cloud, 64, 64)
    assert np.unique(ps.member_indices).size == len(cloud)
