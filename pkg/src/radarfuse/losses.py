"""Trajectory, classification and set-matching losses.

Functions taking probabilities mirror the definitions used for evaluation and
testing; the ``*_grad`` variants return gradients for the hand-written
training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import ANCHOR_DIM, MapPolyline, Trajectory
from .geometry import resample_polyline

FOCAL_GAMMA = 2.0
FOCAL_WEIGHT = 0.25
_LOG_EPS = 1e-12


def _points(traj) -> np.ndarray:
    pts = traj.points if isinstance(traj, Trajectory) else traj
    return np.asarray(pts, dtype=float)


def ade(pred, gt) -> float:
    """Average Euclidean displacement over timesteps."""
    p, g = _points(pred), _points(gt)
    if p.shape != g.shape:
        raise ValueError(f"trajectory shapes differ: {p.shape} vs {g.shape}")
    return float(np.mean(np.linalg.norm(p[..., :2] - g[..., :2], axis=-1)))


def fde(pred, gt) -> float:
    p, g = _points(pred), _points(gt)
    if p.shape != g.shape:
        raise ValueError(f"trajectory shapes differ: {p.shape} vs {g.shape}")
    return float(np.linalg.norm(p[-1, :2] - g[-1, :2]))


def l1_trajectory_loss(pred, gt) -> float:
    """Mean absolute error over every coordinate."""
    p, g = _points(pred), _points(gt)
    if p.shape != g.shape:
        raise ValueError(f"trajectory shapes differ: {p.shape} vs {g.shape}")
    return float(np.mean(np.abs(p - g)))


def positive_mode(modes, gt) -> int:
    """Index of the mode with the lowest ADE; the first one wins ties."""
    m = np.asarray(modes, dtype=float)
    g = _points(gt)
    errs = np.linalg.norm(m[..., :2] - g[None, :, :2], axis=-1).mean(axis=1)
    return int(np.argmin(errs))


def _check_mode_scores(scores: np.ndarray) -> None:
    if scores.ndim != 1 or len(scores) == 0:
        raise ValueError("mode scores must be a non-empty vector")
    if np.any(scores < 0) or np.any(scores > 1) or abs(scores.sum() - 1.0) > 1e-6:
        raise ValueError(f"mode scores must be probabilities summing to 1 (sum={scores.sum():.6g})")


def focal_loss(mode_scores, positive_index: int, gamma: float = FOCAL_GAMMA, weight: float = FOCAL_WEIGHT) -> float:
    """Focal classification loss over mode probabilities.

    The positive mode contributes ``-weight (1 - p)^gamma ln p``; every other mode
    is a negative contributing ``-(1 - weight) p^gamma ln(1 - p)``.
    """
    p = np.asarray(mode_scores, dtype=float)
    _check_mode_scores(p)
    pos = p[positive_index]
    loss = -weight * (1.0 - pos) ** gamma * np.log(max(pos, _LOG_EPS))
    neg = np.delete(p, positive_index)
    if len(neg):
        loss += -(1.0 - weight) * np.sum(neg ** gamma * np.log(np.maximum(1.0 - neg, _LOG_EPS)))
    return float(loss)


def focal_loss_grad(mode_scores, positive_index: int, gamma: float = FOCAL_GAMMA,
                    weight: float = FOCAL_WEIGHT) -> np.ndarray:
    """Gradient of ``focal_loss`` with respect to the probabilities."""
    p = np.clip(np.asarray(mode_scores, dtype=float), _LOG_EPS, 1.0 - _LOG_EPS)
    q = 1.0 - p
    # negatives: d/dp [-(1-w) p^g ln(1-p)]
    g = -(1.0 - weight) * (gamma * p ** (gamma - 1) * np.log(q) - p ** gamma / q)
    pp = p[positive_index]
    g[positive_index] = weight * (gamma * (1 - pp) ** (gamma - 1) * np.log(pp) - (1 - pp) ** gamma / pp)
    return g


def softmax_backward(probs: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Chain a probability gradient through softmax along the last axis."""
    return probs * (grad_p - np.sum(grad_p * probs, axis=-1, keepdims=True))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid_focal_loss(logits, targets, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_WEIGHT):
    """Element-wise binary focal loss on logits; returns ``(loss array, dloss/dlogits)``."""
    x = np.asarray(logits, dtype=float)
    t = np.asarray(targets, dtype=float)
    p = 1.0 / (1.0 + np.exp(-x))
    logp, log1mp = _log_sigmoid(x), _log_sigmoid(-x)
    pos = -alpha * (1 - p) ** gamma * logp
    neg = -(1 - alpha) * p ** gamma * log1mp
    g_pos = alpha * (gamma * (1 - p) ** gamma * p * logp - (1 - p) ** (gamma + 1))
    g_neg = (1 - alpha) * (p ** (gamma + 1) - gamma * p ** gamma * (1 - p) * log1mp)
    return t * pos + (1 - t) * neg, t * g_pos + (1 - t) * g_neg


def sigmoid_focal_from_probs(probs, targets, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_WEIGHT) -> np.ndarray:
    p = np.clip(np.asarray(probs, dtype=float), _LOG_EPS, 1 - _LOG_EPS)
    t = np.asarray(targets, dtype=float)
    return t * (-alpha * (1 - p) ** gamma * np.log(p)) + (1 - t) * (-(1 - alpha) * p ** gamma * np.log(1 - p))


class MatchResult(NamedTuple):
    pairs: tuple  # ((pred, gt), ...) sorted by prediction index
    cost: float


def _assign_rows(a: np.ndarray):
    """Column for each row of an ``n <= m`` cost matrix (shortest augmenting paths with potentials).

    Also returns the row and column potentials, an optimal dual solution.
    """
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: 1-based row owning column j, 0 if free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            cols = np.flatnonzero(used)
            u[p[cols]] += delta
            v[cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _solve(c: np.ndarray):
    """Optimal pairs of a rectangular matrix plus a mask of edges usable by some optimal assignment."""
    n, m = c.shape
    if n == 0 or m == 0:
        return [], np.zeros(c.shape, dtype=bool)
    if n <= m:
        cols, u, v = _assign_rows(c)
        pairs = [(i, int(cols[i])) for i in range(n)]
        reduced = c - u[:, None] - v[None, :]
    else:
        rows, u, v = _assign_rows(c.T)
        pairs = sorted((int(rows[j]), j) for j in range(m))
        reduced = (c.T - u[:, None] - v[None, :]).T
    # complementary slackness: every optimal assignment uses only zero reduced-cost edges
    tol = 1e-9 * (1.0 + float(np.max(np.abs(c))))
    return pairs, reduced <= tol


def _lexicographic(c: np.ndarray, candidates: np.ndarray, best: float):
    """Lexicographically smallest optimal pair list, scanning predictions in order."""
    n, m = c.shape
    k = min(n, m)
    chosen: list = []
    used: set = set()
    for i in range(n):
        options = [j for j in np.flatnonzero(candidates[i]) if j not in used] + ([None] if n > m else [])
        for j in options:
            taken = [p for p in chosen] + ([(i, int(j))] if j is not None else [])
            rest_rows = list(range(i + 1, n))
            rest_cols = [col for col in range(m) if col not in used and col != j]
            need = k - len(taken)
            if min(len(rest_rows), len(rest_cols)) < need:
                continue
            sub, _ = _solve(c[np.ix_(rest_rows, rest_cols)])
            full = taken + [(rest_rows[a], rest_cols[b]) for a, b in sub]
            if math.fsum(c[a, b] for a, b in full) == best:
                chosen = taken
                if j is not None:
                    used.add(int(j))
                break
        if len(chosen) == k:
            break
    return sorted(chosen)


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment of ``min(N_pred, N_gt)`` pairs."""
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return MatchResult((), 0.0)
    pairs, candidates = _solve(c)
    # correctly rounded, so the total does not depend on summation order
    best = math.fsum(c[i, j] for i, j in pairs)
    if candidates.sum() > len(pairs):
        # another optimum may exist; prefer the lexicographically smallest pair list
        pairs = _lexicographic(c, candidates, best)
    return MatchResult(tuple(pairs), best)


@dataclass(frozen=True)
class DetectionLossWeights:
    match_class: float = 2.0
    match_l1: float = 0.25
    classification: float = 1.0
    regression: float = 0.25


def _anchor(inst) -> np.ndarray:
    return np.asarray(inst.anchor if hasattr(inst, "anchor") else inst, dtype=float)


def detection_cost(probs: np.ndarray, boxes: np.ndarray, gt_labels: np.ndarray, gt_boxes: np.ndarray,
                   weights: DetectionLossWeights = DetectionLossWeights()) -> np.ndarray:
    """``(N_pred, N_gt)`` matching cost: class cost plus summed L1 over the 11 anchor parameters."""
    cls = 1.0 - probs[:, gt_labels]
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    return weights.match_class * cls + weights.match_l1 * l1


def detection_loss(preds: Sequence, gts: Sequence, weights: DetectionLossWeights = DetectionLossWeights()):
    """Hungarian-matched focal classification plus L1 box regression.

    Classification is normalised by ``max(1, N_gt)``; regression is the mean
    absolute anchor error over matched pairs. Returns ``(total, breakdown)``.
    """
    n_cls = len(preds[0].class_scores) if len(preds) else 3
    probs = np.array([np.asarray(p.class_scores, dtype=float) for p in preds]).reshape(-1, n_cls)
    boxes = np.array([_anchor(p) for p in preds]).reshape(-1, ANCHOR_DIM)
    gt_labels = np.array([g.label for g in gts], dtype=int)
    gt_boxes = np.array([_anchor(g) for g in gts]).reshape(-1, ANCHOR_DIM)
    match = hungarian_match(detection_cost(probs, boxes, gt_labels, gt_boxes, weights)) if len(preds) and len(gts) \
        else MatchResult((), 0.0)
    targets = np.zeros_like(probs)
    reg = 0.0
    for i, j in match.pairs:
        targets[i, gt_labels[j]] = 1.0
        reg += float(np.mean(np.abs(boxes[i] - gt_boxes[j])))
    cls = float(sigmoid_focal_from_probs(probs, targets).sum()) / max(1, len(gts))
    reg = reg / len(match.pairs) if match.pairs else 0.0
    total = weights.classification * cls + weights.regression * reg
    return total, {"classification": cls, "regression": reg, "matches": match.pairs}


def _poly_points(p) -> np.ndarray:
    return np.asarray(p.waypoints if isinstance(p, MapPolyline) else p, dtype=float)[:, :2]


def chamfer_cost_matrix(preds: Sequence, gts: Sequence) -> np.ndarray:
    """Symmetric point-set Chamfer distance for every (prediction, ground truth) pair.

    Each direction averages, over one polyline's waypoints, the distance to the
    nearest waypoint of the other.
    """
    out = np.zeros((len(preds), len(gts)))
    pa = [_poly_points(p) for p in preds]
    ga = [_poly_points(g) for g in gts]
    if not pa or not ga:
        return out
    p_all, g_all = np.concatenate(pa), np.concatenate(ga)
    diff = p_all[:, None, :] - g_all[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    p_start = np.cumsum([0] + [len(p) for p in pa[:-1]])
    g_start = np.cumsum([0] + [len(g) for g in ga[:-1]])
    p_len = np.array([len(p) for p in pa], dtype=float)
    g_len = np.array([len(g) for g in ga], dtype=float)
    # nearest waypoint of each ground truth for every prediction waypoint, and vice versa
    to_gt = np.add.reduceat(np.minimum.reduceat(d, g_start, axis=1), p_start, axis=0) / p_len[:, None]
    to_pred = np.add.reduceat(np.minimum.reduceat(d, p_start, axis=0), g_start, axis=1) / g_len[None, :]
    return 0.5 * (to_gt + to_pred)


def oriented_target(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Ground truth resampled to the prediction's length, in the direction with lower L1."""
    g = resample_polyline(gt, len(pred))
    rev = g[::-1]
    return g if np.abs(pred - g).sum() <= np.abs(pred - rev).sum() else rev


def map_loss(preds: Sequence[MapPolyline], gts: Sequence[MapPolyline], class_weight: float = 2.0,
             regression_weight: float = 0.25):
    """Chamfer-cost Hungarian matching, focal class loss and per-waypoint L1."""
    n_cls = len(preds[0].class_scores) if len(preds) else 3
    probs = np.array([np.asarray(p.class_scores, dtype=float) for p in preds]).reshape(-1, n_cls)
    gt_labels = np.array([g.label for g in gts], dtype=int)
    pairs: tuple = ()
    if len(preds) and len(gts):
        cost = class_weight * (1.0 - probs[:, gt_labels]) + chamfer_cost_matrix(preds, gts)
        pairs = hungarian_match(cost).pairs
    targets = np.zeros_like(probs)
    reg = 0.0
    for i, j in pairs:
        targets[i, gt_labels[j]] = 1.0
        pw = _poly_points(preds[i])
        reg += float(np.mean(np.abs(pw - oriented_target(pw, _poly_points(gts[j])))))
    cls = float(sigmoid_focal_from_probs(probs, targets).sum()) / max(1, len(gts))
    reg = reg / len(pairs) if pairs else 0.0
    return cls + regression_weight * reg, {"classification": cls, "regression": reg, "matches": pairs}
