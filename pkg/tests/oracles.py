"""Independent brute-force references used by the tests.

Nothing here imports the implementation under test except plain data types.
"""

import itertools
import math

import numpy as np


def dense_polyline_samples(waypoints, n=100_000):
    wp = np.asarray(waypoints, dtype=float)
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.linspace(0.0, s[-1], n)
    t = np.union1d(t, s)  # vertices always included
    return np.stack([np.interp(t, s, wp[:, 0]), np.interp(t, s, wp[:, 1])], axis=1)


def dense_point_polyline_distance(p, waypoints, n=100_000):
    pts = dense_polyline_samples(waypoints, n)
    return float(np.min(np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1])))


def box_corners(x, y, hl, hw, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + [x, y]


def in_box(points, x, y, hl, hw, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = points[:, 0] - x, points[:, 1] - y
    return (np.abs(c * dx + s * dy) <= hl) & (np.abs(-s * dx + c * dy) <= hw)


def grid_overlap(a, b, n=100):
    """Overlap by point containment.

    Probes are an ``n x n`` lattice over the intersection of the two bounding
    rectangles plus both boxes' corners, so corner-poke slivers are caught.
    """
    ca, cb = box_corners(*a), box_corners(*b)
    # corners pulled 1e-9 inward so rounding cannot place them outside their own box
    inner = [box_corners(x, y, hl * (1 - 1e-9), hw * (1 - 1e-9), yaw) for x, y, hl, hw, yaw in (a, b)]
    lo = np.maximum(ca.min(0), cb.min(0))
    hi = np.minimum(ca.max(0), cb.max(0))
    if np.any(lo > hi):
        return False
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n))
    pts = np.vstack([np.stack([gx.ravel(), gy.ravel()], axis=1), *inner])
    return bool(np.any(in_box(pts, *a) & in_box(pts, *b)))


def brute_assignment(cost):
    """Minimum cost over every injective row->column map (rows <= cols assumed after transposition)."""
    c = np.asarray(cost, dtype=float)
    if c.shape[0] > c.shape[1]:
        c = c.T
    n, m = c.shape
    best = math.inf
    for cols in itertools.permutations(range(m), n):
        best = min(best, math.fsum(c[i, j] for i, j in enumerate(cols)))
    return best


def softmax_rows(x):
    out = []
    for row in x:
        m = max(row)
        e = [math.exp(v - m) for v in row]
        z = math.fsum(e)
        out.append([v / z for v in e])
    return np.array(out)


def naive_attention(q, k, v, pq, pk, alpha, r_max):
    d = q.shape[1]
    logits = np.empty((len(q), len(k)))
    for i in range(len(q)):
        for j in range(len(k)):
            dist = math.sqrt(sum((pq[i, t] - pk[j, t]) ** 2 for t in range(3)))
            logits[i, j] = math.fsum(q[i] * k[j]) / math.sqrt(d) - alpha * dist / r_max
    w = softmax_rows(logits)
    return w @ v, w


def exhaustive_two_partition(points):
    """Best split of ``points`` into two non-empty clusters by within-cluster sum of squares."""
    x = np.asarray(points, dtype=float)
    n = len(x)
    best, best_mask = math.inf, None
    for bits in range(1, 2 ** (n - 1)):
        mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        a, b = x[mask], x[~mask]
        cost = ((a - a.mean(0)) ** 2).sum() + ((b - b.mean(0)) ** 2).sum()
        if cost < best:
            best, best_mask = cost, mask
    return best, best_mask


def pr_area_101(tp_flags_by_score, n_gt, min_recall=0.1, min_precision=0.1):
    """nuScenes-style AP from a hand-built list of (score, is_tp) detections.

    Detections with equal scores are applied together as one PR point.
    """
    dets = sorted(tp_flags_by_score, key=lambda d: -d[0])
    recalls, precisions = [], []
    tp = fp = 0
    i = 0
    while i < len(dets):
        j = i
        while j < len(dets) and dets[j][0] == dets[i][0]:
            tp += dets[j][1]
            fp += 1 - dets[j][1]
            j += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
        i = j
    if not dets:
        return 0.0
    prec = []
    for k in range(101):
        r = k / 100
        if r < recalls[0]:
            prec.append(precisions[0])
        elif r > recalls[-1]:
            prec.append(0.0)
        else:
            # a recall shared by several PR points takes the precision of the last one
            j = max(j for j in range(len(recalls)) if recalls[j] <= r)
            if recalls[j] == r:
                prec.append(precisions[j])
            else:
                r0, r1, p0, p1 = recalls[j], recalls[j + 1], precisions[j], precisions[j + 1]
                prec.append(p0 + (p1 - p0) * (r - r0) / (r1 - r0))
    prec = np.array(prec)[round(100 * min_recall) + 1:]
    prec = prec - min_precision
    prec[prec < 0] = 0
    return math.fsum(prec) / len(prec) / (1.0 - min_precision)
