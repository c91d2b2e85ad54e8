"""Naive reference implementations, written as plain loops independent of the package."""

import math

import numpy as np


def pool(per_point, members):
    out = []
    for row in members:
        acc = [0.0] * len(per_point[0])
        for i in row:
            for c, v in enumerate(per_point[i]):
                acc[c] += v
        out.append([a / len(row) for a in acc])
    return np.array(out)


def cosine_matrix(rows):
    m = len(rows)
    out = np.zeros((m, m))
    norms = [math.sqrt(sum(v * v for v in r)) for r in rows]
    for j in range(m):
        for k in range(m):
            if norms[j] > 0 and norms[k] > 0:
                out[j, k] = sum(a * b for a, b in zip(rows[j], rows[k])) / (norms[j] * norms[k])
    return out


def mse(pred, true):
    total, count = 0.0, 0
    for p, t in zip(pred, true):
        for a, b in zip(p, t):
            total += (a - b) ** 2
            count += 1
    return total / count


def affinity_loss(a, b):
    m = len(a)
    return sum((a[j][k] - b[j][k]) ** 2 for j in range(m) for k in range(m)) / (m * m)


def koleo(rows, eps=1e-8):
    unit = [np.array(r) / math.sqrt(sum(v * v for v in r)) for r in rows]
    total = 0.0
    for j, u in enumerate(unit):
        d = min(math.sqrt(sum((a - b) ** 2 for a, b in zip(u, w))) for k, w in enumerate(unit) if k != j)
        total += math.log(max(d, eps))
    return -total / len(rows)


def propagate(points, centers, feats, k=3, eps=1e-8):
    out = []
    for p in points:
        d = [math.sqrt(sum((a - b) ** 2 for a, b in zip(p, c))) for c in centers]
        nearest = sorted(range(len(centers)), key=lambda j: (d[j], j))[:k]
        w = [1.0 / (d[j] + eps) for j in nearest]
        s = sum(w)
        out.append([sum(w[t] * feats[j][c] for t, j in enumerate(nearest)) / s for c in range(len(feats[0]))])
    return np.array(out)


def focal(logits, target, gamma=2.0, alpha=0.25):
    total = 0.0
    for z, g in zip(logits, target):
        p = 1.0 / (1.0 + math.exp(-z))
        y = 1.0 if g >= 0.5 else 0.0
        pt = p if y else 1 - p
        at = alpha if y else 1 - alpha
        total += -at * (1 - pt) ** gamma * math.log(pt)
    return total / len(logits)


def dice(scores, target, smooth=1.0):
    inter = sum(s * g for s, g in zip(scores, target))
    return 1 - (2 * inter + smooth) / (sum(scores) + sum(target) + smooth)


def aiou(p, g):
    P = {i for i, v in enumerate(p) if v >= 0.5}
    G = {i for i, v in enumerate(g) if v >= 0.5}
    return 1.0 if not P | G else len(P & G) / len(P | G)


def auc(s, g):
    pos = [s[i] for i in range(len(s)) if g[i] >= 0.5]
    neg = [s[i] for i in range(len(s)) if g[i] < 0.5]
    if not pos or not neg:
        return None
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def sim(p, g):
    sp, sg = sum(p), sum(g)
    if sp <= 0 or sg <= 0:
        return 0.0
    return sum(min(a / sp, b / sg) for a, b in zip(p, g))


def mae(p, g):
    return sum(abs(a - b) for a, b in zip(p, g)) / len(p)


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at float64 array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)
