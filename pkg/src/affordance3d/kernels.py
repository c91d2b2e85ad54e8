"""Hot geometry loops: farthest-point sampling, kNN, z-buffer splatting.

Every kernel exists twice, a numba ``@njit`` version and a pure-numpy
version, and both return bit-identical results (ties are always broken by
lowest index). The numba path is used when numba imports and the
``AFFORDANCE3D_DISABLE_NUMBA`` environment variable is unset or "0".
Pass ``backend="numpy"``/``"numba"`` to force one path.
"""

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

DISABLE_ENV = "AFFORDANCE3D_DISABLE_NUMBA"

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get(DISABLE_ENV, "0").lower() in ("", "0", "false", "no")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def _pick(backend):
    if backend is None:
        return "numba" if USE_NUMBA else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend


# ---------------------------------------------------------------------------
# farthest point sampling

@_njit
def _fps_nb(points, m, start):
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    dist = np.full(n, np.inf)
    out[0] = start
    last = start
    for s in range(1, m):
        lx = points[last, 0]
        ly = points[last, 1]
        lz = points[last, 2]
        best = -1.0
        best_i = 0
        for i in range(n):
            dx = points[i, 0] - lx
            dy = points[i, 1] - ly
            dz = points[i, 2] - lz
            d = dx * dx + dy * dy + dz * dz
            if d < dist[i]:
                dist[i] = d
            if dist[i] > best:
                best = dist[i]
                best_i = i
        out[s] = best_i
        last = best_i
    return out


def _fps_np(points, m, start):
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    dist = np.full(n, np.inf)
    out[0] = start
    last = start
    for s in range(1, m):
        diff = points - points[last]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(dist, d, out=dist)
        last = int(np.argmax(dist))  # first maximum -> lowest index
        out[s] = last
    return out


def fps(points, m, start=0, backend=None):
    """Greedy max-min selection of ``m`` indices starting at ``start``."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if _pick(backend) == "numba":
        return _fps_nb(points, int(m), int(start))
    return _fps_np(points, int(m), int(start))


# ---------------------------------------------------------------------------
# k nearest neighbours (ties -> lower index)

@_njit
def _knn_nb(data, queries, k):
    q = queries.shape[0]
    n = data.shape[0]
    idx = np.empty((q, k), dtype=np.int64)
    out_d = np.empty((q, k), dtype=np.float64)
    d = np.empty(n, dtype=np.float64)
    for j in range(q):
        qx = queries[j, 0]
        qy = queries[j, 1]
        qz = queries[j, 2]
        for i in range(n):
            dx = data[i, 0] - qx
            dy = data[i, 1] - qy
            dz = data[i, 2] - qz
            d[i] = dx * dx + dy * dy + dz * dz
        order = np.argsort(d, kind="mergesort")
        for t in range(k):
            idx[j, t] = order[t]
            out_d[j, t] = d[order[t]]
    return idx, out_d


def _knn_np(data, queries, k):
    diff = queries[:, None, :] - data[None, :, :]
    d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order.astype(np.int64), np.take_along_axis(d, order, axis=1)


def knn(data, queries, k, backend=None):
    """Indices and squared distances of the ``k`` nearest ``data`` rows per query."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if _pick(backend) == "numba":
        return _knn_nb(data, queries, int(k))
    return _knn_np(data, queries, int(k))


def idw_weights(points, centers, k, eps=1e-8, backend=None):
    """Inverse-distance weights of each point's ``k`` nearest centers.

    Returns ``(idx, w)`` with rows of ``w`` summing to one; the weight of a
    center at distance ``d`` is proportional to ``1 / (d + eps)``.
    """
    idx, d2 = knn(centers, points, k, backend=backend)
    w = 1.0 / (np.sqrt(d2) + eps)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


# ---------------------------------------------------------------------------
# z-buffer point splatting

@_njit
def _splat_nb(u, v, z, valid, height, width, radius):
    n = u.shape[0]
    zbuf = np.full((height, width), np.inf)
    winner = np.full((height, width), -1, dtype=np.int64)
    r2 = radius * radius
    for i in range(n):
        if not valid[i]:
            continue
        c0 = max(int(math.floor(u[i] - radius)), 0)
        c1 = min(int(math.floor(u[i] + radius)), width - 1)
        r0 = max(int(math.floor(v[i] - radius)), 0)
        r1 = min(int(math.floor(v[i] + radius)), height - 1)
        for rr in range(r0, r1 + 1):
            for cc in range(c0, c1 + 1):
                du = cc + 0.5 - u[i]
                dv = rr + 0.5 - v[i]
                if du * du + dv * dv <= r2 and z[i] < zbuf[rr, cc]:
                    zbuf[rr, cc] = z[i]
                    winner[rr, cc] = i
    rep = np.full((n, 2), -1, dtype=np.int64)
    for i in range(n):
        if not valid[i]:
            continue
        c0 = max(int(math.floor(u[i] - radius)), 0)
        c1 = min(int(math.floor(u[i] + radius)), width - 1)
        r0 = max(int(math.floor(v[i] - radius)), 0)
        r1 = min(int(math.floor(v[i] + radius)), height - 1)
        best = np.inf
        for rr in range(r0, r1 + 1):
            for cc in range(c0, c1 + 1):
                if winner[rr, cc] == i:
                    du = cc + 0.5 - u[i]
                    dv = rr + 0.5 - v[i]
                    dd = du * du + dv * dv
                    if dd < best:
                        best = dd
                        rep[i, 0] = rr
                        rep[i, 1] = cc
    return zbuf, winner, rep


def _splat_np(u, v, z, valid, height, width, radius):
    n = u.shape[0]
    zbuf = np.full((height, width), np.inf)
    winner = np.full((height, width), -1, dtype=np.int64)
    rep = np.full((n, 2), -1, dtype=np.int64)
    ids = np.nonzero(valid)[0]
    if ids.size == 0:
        return zbuf, winner, rep
    span = int(math.ceil(2 * radius)) + 1
    off = np.arange(span + 1)
    cu = np.floor(u[ids] - radius).astype(np.int64)
    rv = np.floor(v[ids] - radius).astype(np.int64)
    rr = rv[:, None, None] + off[None, :, None]
    cc = cu[:, None, None] + off[None, None, :]
    du = cc + 0.5 - u[ids][:, None, None]
    dv = rr + 0.5 - v[ids][:, None, None]
    dd = du * du + dv * dv
    ok = (dd <= radius * radius) & (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
    owner = np.broadcast_to(ids[:, None, None], ok.shape)[ok]
    rr = np.broadcast_to(rr, ok.shape)[ok]
    cc = np.broadcast_to(cc, ok.shape)[ok]
    dd = dd[ok]
    if owner.size == 0:
        return zbuf, winner, rep
    lin = rr * width + cc
    pz = z[owner]
    # per pixel: nearest depth, then lowest point index
    order = np.lexsort((owner, pz, lin))
    lin_s = lin[order]
    first = np.ones(lin_s.size, dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    win_lin = lin_s[first]
    win_pt = owner[order][first]
    zbuf.reshape(-1)[win_lin] = pz[order][first]
    winner.reshape(-1)[win_lin] = win_pt
    # per point: nearest won pixel, then lowest linear pixel index
    won = winner.reshape(-1)[lin] == owner
    o2, d2, l2 = owner[won], dd[won], lin[won]
    order = np.lexsort((l2, d2, o2))
    o2s = o2[order]
    first = np.ones(o2s.size, dtype=bool)
    first[1:] = o2s[1:] != o2s[:-1]
    pts = o2s[first]
    best = l2[order][first]
    rep[pts, 0] = best // width
    rep[pts, 1] = best % width
    return zbuf, winner, rep


def splat(u, v, z, height, width, radius, near=1e-6, backend=None):
    """Splat projected points into a z-buffer.

    ``u``/``v`` are continuous column/row coordinates (pixel ``(r, c)`` has
    its center at ``(r + 0.5, c + 0.5)``), ``z`` the camera-space depth.
    A point covers every pixel whose center lies within ``radius`` of it.
    Returns ``(depth, winner, rep)``: the per-pixel minimum depth, the
    winning point index per pixel (-1 for background), and per point the
    won pixel closest to its projection ((-1, -1) if it won none).
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    valid = np.isfinite(u) & np.isfinite(v) & np.isfinite(z) & (z > near)
    if _pick(backend) == "numba":
        return _splat_nb(u, v, z, valid, int(height), int(width), float(radius))
    return _splat_np(u, v, z, valid, int(height), int(width), float(radius))
