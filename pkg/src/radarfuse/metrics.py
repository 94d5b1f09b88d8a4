"""Planning, motion and detection metrics plus the NDS composite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    AGENT_CLASSES,
    COS,
    DT,
    H,
    L,
    SIN,
    VX,
    VY,
    W,
    X,
    Y,
    Pose2D,
    relative_pose,
    transform_points,
    wrap_angle,
)
from .geometry import OrientedBox2D, boxes_overlap
from .losses import hungarian_match

NEAR_HORIZONS = (1.0, 2.0, 3.0)
FAR_HORIZONS = (4.0, 5.0, 6.0)
EGO_LENGTH = 4.08
EGO_WIDTH = 1.73
MATCH_THRESHOLD = 2.0
EPA_FP_WEIGHT = 0.5
DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
RECALL_BINS = 101
TP_NAMES = ("mATE", "mASE", "mAOE", "mAVE", "mAAE")


def horizon_index(horizon: float, steps: int, dt: float = DT) -> int:
    """Array index of the point at ``horizon`` seconds; point ``i`` lies at ``(i + 1) dt``."""
    k = int(round(horizon / dt))
    if k < 1 or abs(k * dt - horizon) > 1e-9:
        raise ValueError(f"horizon {horizon} s is not a positive multiple of {dt} s")
    if k > steps:
        raise ValueError(f"horizon {horizon} s needs {k} points, plan has {steps}")
    return k - 1


def horizon_key(h: float) -> str:
    return f"{h:g}s"


def l2_at_horizons(plan, gt_future, horizons: Sequence[float] = NEAR_HORIZONS) -> dict:
    """Displacement at each horizon's exact index plus their average."""
    p = np.asarray(plan, dtype=float)[:, :2]
    g = np.asarray(gt_future, dtype=float)[:, :2]
    if len(g) < len(p):
        raise ValueError(f"ground truth has {len(g)} points, plan has {len(p)}")
    out = {}
    for h in horizons:
        i = horizon_index(h, len(p))
        out[horizon_key(h)] = float(np.hypot(*(p[i] - g[i])))
    out["avg"] = math.fsum(out[horizon_key(h)] for h in horizons) / len(horizons)
    return out


def plan_headings(plan) -> np.ndarray:
    """Heading at each plan point from the incoming segment; holds the last heading when stationary."""
    p = np.vstack([np.zeros((1, 2)), np.asarray(plan, dtype=float)[:, :2]])
    d = np.diff(p, axis=0)
    yaw = np.zeros(len(d))
    last = 0.0
    for i, (dx, dy) in enumerate(d):
        if math.hypot(dx, dy) > 1e-6:
            last = math.atan2(dy, dx)
        yaw[i] = last
    return yaw


@dataclass(frozen=True, eq=False)
class PlanningRecord:
    plan: np.ndarray  # (T, 2) selected plan, current ego frame
    gt_future: np.ndarray  # (T, 2|3) ground-truth ego future
    agent_boxes: tuple = ()  # per timestep: (N_t, 5) x, y, yaw, length, width in the current ego frame
    prev_plan: Optional[np.ndarray] = None  # previous frame's plan in its own ego frame
    prev_to_current: Optional[Pose2D] = None  # maps previous ego coordinates into the current ones
    scene_id: str = ""
    index: int = 0


def ego_footprints(plan, length: float = EGO_LENGTH, width: float = EGO_WIDTH) -> list[OrientedBox2D]:
    p = np.asarray(plan, dtype=float)
    return [OrientedBox2D(p[i, 0], p[i, 1], 0.5 * length, 0.5 * width, yaw) for i, yaw in enumerate(plan_headings(p))]


def first_collision(record: PlanningRecord, length: float = EGO_LENGTH, width: float = EGO_WIDTH) -> Optional[int]:
    """Index of the first plan step whose footprint overlaps a ground-truth agent, else ``None``."""
    for i, ego in enumerate(ego_footprints(record.plan, length, width)):
        if i >= len(record.agent_boxes):
            break
        for x, y, yaw, bl, bw in np.asarray(record.agent_boxes[i], dtype=float).reshape(-1, 5):
            if boxes_overlap(ego, OrientedBox2D(x, y, 0.5 * bl, 0.5 * bw, yaw)):
                return i
    return None


def collision_rate(records: Sequence[PlanningRecord], horizons: Sequence[float] = NEAR_HORIZONS,
                   length: float = EGO_LENGTH, width: float = EGO_WIDTH) -> dict:
    """Percentage of frames colliding at any step up to each horizon, plus the average."""
    hits = [first_collision(r, length, width) for r in records]
    out = {}
    for h in horizons:
        if not records:
            out[horizon_key(h)] = 0.0
            continue
        idx = [horizon_index(h, len(r.plan)) for r in records]
        n = sum(1 for c, i in zip(hits, idx) if c is not None and c <= i)
        out[horizon_key(h)] = 100.0 * n / len(records)
    out["avg"] = math.fsum(out[horizon_key(h)] for h in horizons) / len(horizons)
    return out


def tpc(current_plan, previous_plan, horizons: Sequence[float] = NEAR_HORIZONS,
        prev_to_current: Optional[Pose2D] = None, shift: int = 1) -> Optional[dict]:
    """Mean displacement between the current plan and the shifted, re-expressed previous plan.

    Returns ``None`` when there is no previous plan. Each horizon averages over the
    overlapping points up to that horizon.
    """
    if previous_plan is None:
        return None
    cur = np.asarray(current_plan, dtype=float)[:, :2]
    prev = np.asarray(previous_plan, dtype=float)[:, :2]
    if prev_to_current is not None:
        prev = transform_points(prev, prev_to_current)
    shifted = prev[shift:]
    n = min(len(cur), len(shifted))
    if n == 0:
        raise ValueError("plans do not overlap after the shift")
    d = np.hypot(*(cur[:n] - shifted[:n]).T)
    out = {}
    for h in horizons:
        i = min(horizon_index(h, len(cur)), n - 1)
        out[horizon_key(h)] = math.fsum(d[: i + 1]) / (i + 1)
    out["avg"] = math.fsum(out[horizon_key(h)] for h in horizons) / len(horizons)
    return out


def mean_tpc(records: Sequence[PlanningRecord], horizons: Sequence[float] = NEAR_HORIZONS) -> dict:
    """Average of per-frame TPC over frames with a previous plan; skipped frames are excluded."""
    vals = [tpc(r.plan, r.prev_plan, horizons, r.prev_to_current) for r in records]
    vals = [v for v in vals if v is not None]
    keys = [horizon_key(h) for h in horizons] + ["avg"]
    if not vals:
        return {k: float("nan") for k in keys} | {"frames": 0}
    return {k: math.fsum(v[k] for v in vals) / len(vals) for k in keys} | {"frames": len(vals)}


@dataclass(frozen=True, eq=False)
class MotionRecord:
    pred_centers: np.ndarray  # (N, 2)
    pred_futures: tuple  # TrajectorySet per prediction
    gt_centers: np.ndarray  # (M, 2)
    gt_futures: np.ndarray  # (M, T, 2)


@dataclass(frozen=True)
class MotionMetrics:
    min_ade: float
    min_fde: float
    miss_rate: float
    epa: float
    matched: int
    hits: int
    false_positives: int
    num_gt: int


def match_centers(pred, gt, threshold: float) -> list[tuple[int, int]]:
    """Minimum-distance one-to-one matching, keeping pairs within ``threshold``."""
    p = np.asarray(pred, dtype=float).reshape(-1, 2)
    g = np.asarray(gt, dtype=float).reshape(-1, 2)
    if len(p) == 0 or len(g) == 0:
        return []
    dist = np.hypot(p[:, None, 0] - g[None, :, 0], p[:, None, 1] - g[None, :, 1])
    # pairs beyond the threshold cost the same, so they never displace a valid pair
    cost = np.minimum(dist, threshold * 1.0001 + 1.0)
    return [(i, j) for i, j in hungarian_match(cost).pairs if dist[i, j] <= threshold]


def motion_metrics(records: Sequence[MotionRecord], match_threshold: float = MATCH_THRESHOLD,
                   miss_threshold: float = MATCH_THRESHOLD) -> MotionMetrics:
    ades, fdes = [], []
    hits = fps = n_gt = 0
    for r in records:
        gt = np.asarray(r.gt_futures, dtype=float)
        n_gt += len(gt)
        pairs = match_centers(r.pred_centers, r.gt_centers, match_threshold)
        fps += len(r.pred_centers) - len(pairs)
        for i, j in pairs:
            modes = np.asarray(r.pred_futures[i].modes, dtype=float)[:, :, :2]
            t = min(modes.shape[1], gt.shape[1])
            err = np.hypot(*(modes[:, :t] - gt[j, None, :t, :2]).transpose(2, 0, 1))  # (K, t)
            ade = float(np.min(err.mean(axis=1)))
            fde = float(np.min(err[:, -1]))
            ades.append(ade)
            fdes.append(fde)
            hits += fde <= miss_threshold
    m = len(ades)
    nan = float("nan")
    return MotionMetrics(
        min_ade=math.fsum(ades) / m if m else nan,
        min_fde=math.fsum(fdes) / m if m else nan,
        miss_rate=sum(f > miss_threshold for f in fdes) / m if m else nan,
        epa=(hits - EPA_FP_WEIGHT * fps) / n_gt if n_gt else nan,
        matched=m,
        hits=int(hits),
        false_positives=int(fps),
        num_gt=n_gt,
    )


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    pred_boxes: np.ndarray  # (N, 11)
    pred_labels: np.ndarray  # (N,)
    pred_scores: np.ndarray  # (N,)
    gt_boxes: np.ndarray  # (M, 11)
    gt_labels: np.ndarray  # (M,)

    def __post_init__(self):
        s = np.asarray(self.pred_scores, dtype=float)
        if len(s) and (np.any(s < 0) or np.any(s > 1)):
            raise ValueError("detection scores must lie in [0, 1]")


@dataclass(frozen=True)
class DetectionMetrics:
    mAP: float
    mATE: float
    mASE: float
    mAOE: float
    mAVE: float
    mAAE: float
    ap: dict = field(default_factory=dict)  # class -> threshold -> AP

    @property
    def tp_errors(self) -> tuple:
        return (self.mATE, self.mASE, self.mAOE, self.mAVE, self.mAAE)


def _yaw(b) -> float:
    return math.atan2(b[SIN], b[COS])


def scale_iou(a, b) -> float:
    """IoU of two boxes after aligning their centres and headings."""
    da = np.maximum(np.asarray(a, dtype=float)[[W, L, H]], 0.0)
    db = np.maximum(np.asarray(b, dtype=float)[[W, L, H]], 0.0)
    inter = float(np.prod(np.minimum(da, db)))
    union = float(np.prod(da) + np.prod(db)) - inter
    return inter / union if union > 0 else 0.0


def greedy_matches(records: Sequence[DetectionRecord], label: int, threshold: float):
    """Score-ordered greedy matching of one class.

    Returns ``(scores, is_tp, matches, num_gt)`` with ``matches`` holding
    ``(record, pred, gt)`` triples in score order.
    """
    entries = []
    n_gt = 0
    for r_i, r in enumerate(records):
        n_gt += int(np.sum(np.asarray(r.gt_labels) == label))
        for p_i in np.flatnonzero(np.asarray(r.pred_labels) == label):
            entries.append((-float(r.pred_scores[p_i]), r_i, int(p_i)))
    entries.sort()
    taken = [np.zeros(len(r.gt_labels), dtype=bool) for r in records]
    scores, tp, matches = [], [], []
    for neg, r_i, p_i in entries:
        r = records[r_i]
        gt = np.asarray(r.gt_boxes, dtype=float).reshape(-1, 11)
        ok = (np.asarray(r.gt_labels) == label) & ~taken[r_i]
        best, best_d = -1, math.inf
        for g_i in np.flatnonzero(ok):
            d = math.hypot(r.pred_boxes[p_i][X] - gt[g_i, X], r.pred_boxes[p_i][Y] - gt[g_i, Y])
            if d < best_d:
                best, best_d = int(g_i), d
        hit = best >= 0 and best_d < threshold
        if hit:
            taken[r_i][best] = True
            matches.append((r_i, p_i, best))
        scores.append(-neg)
        tp.append(hit)
    return np.array(scores), np.array(tp, dtype=bool), matches, n_gt


def precision_recall(scores, is_tp, num_gt: int):
    """Cumulative precision and recall, one point per distinct score (ties are evaluated together)."""
    if num_gt == 0 or len(scores) == 0:
        return np.zeros(0), np.zeros(0)
    tp = np.cumsum(is_tp).astype(float)
    fp = np.cumsum(~is_tp).astype(float)
    last = np.r_[scores[1:] != scores[:-1], True]
    tp, fp = tp[last], fp[last]
    return tp / (tp + fp), tp / num_gt


def average_precision(precision, recall, min_recall: float = MIN_RECALL, min_precision: float = MIN_PRECISION) -> float:
    """Area of the interpolated PR curve above ``min_precision`` for recalls beyond ``min_recall``, normalised."""
    if len(precision) == 0:
        return 0.0
    grid = np.linspace(0.0, 1.0, RECALL_BINS)
    prec = np.interp(grid, recall, precision, right=0.0)
    prec = prec[int(round(100 * min_recall)) + 1:] - min_precision
    prec[prec < 0] = 0.0
    return math.fsum(prec) / len(prec) / (1.0 - min_precision)


def detection_map(records: Sequence[DetectionRecord], dist_thresholds: Sequence[float] = DIST_THRESHOLDS,
                  tp_threshold: float = TP_THRESHOLD) -> DetectionMetrics:
    """Centre-distance mAP over classes present in the ground truth and the five TP errors.

    Translation, scale, orientation and velocity errors come from same-class matches
    at ``tp_threshold`` and are averaged per class; a class without any match scores 1.
    The attribute error is the label disagreement rate of class-agnostic matches.
    """
    classes = sorted({int(l) for r in records for l in np.asarray(r.gt_labels).reshape(-1)})
    ap: dict = {}
    tp_err = {k: [] for k in ("ate", "ase", "aoe", "ave")}
    for c in classes:
        ap[AGENT_CLASSES[c]] = {}
        for t in dist_thresholds:
            scores, is_tp, _, n_gt = greedy_matches(records, c, t)
            prec, rec = precision_recall(scores, is_tp, n_gt)
            ap[AGENT_CLASSES[c]][f"{t:g}"] = average_precision(prec, rec)
        _, _, matches, _ = greedy_matches(records, c, tp_threshold)
        errs = {k: [] for k in tp_err}
        for r_i, p_i, g_i in matches:
            p = np.asarray(records[r_i].pred_boxes[p_i], dtype=float)
            g = np.asarray(records[r_i].gt_boxes[g_i], dtype=float)
            errs["ate"].append(math.hypot(p[X] - g[X], p[Y] - g[Y]))
            errs["ase"].append(1.0 - scale_iou(p, g))
            errs["aoe"].append(abs(float(wrap_angle(_yaw(p) - _yaw(g)))))
            errs["ave"].append(math.hypot(p[VX] - g[VX], p[VY] - g[VY]))
        for k in tp_err:
            tp_err[k].append(math.fsum(errs[k]) / len(errs[k]) if errs[k] else 1.0)
    if not classes:
        return DetectionMetrics(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, {})
    per_class = [math.fsum(ap[k].values()) / len(dist_thresholds) for k in ap]
    mean = {k: math.fsum(v) / len(v) for k, v in tp_err.items()}
    return DetectionMetrics(math.fsum(per_class) / len(per_class), mean["ate"], mean["ase"], mean["aoe"],
                            mean["ave"], attribute_error(records, tp_threshold), ap)


def attribute_error(records: Sequence[DetectionRecord], threshold: float = TP_THRESHOLD) -> float:
    """Fraction of class-agnostic greedy matches whose predicted label differs from the ground truth."""
    wrong = total = 0
    entries = sorted((-float(s), r_i, p_i) for r_i, r in enumerate(records) for p_i, s in enumerate(r.pred_scores))
    taken = [np.zeros(len(r.gt_labels), dtype=bool) for r in records]
    for _, r_i, p_i in entries:
        r = records[r_i]
        if len(r.gt_labels) == 0:
            continue
        gt = np.asarray(r.gt_boxes, dtype=float).reshape(-1, 11)
        d = np.hypot(gt[:, X] - r.pred_boxes[p_i][X], gt[:, Y] - r.pred_boxes[p_i][Y])
        d[taken[r_i]] = np.inf
        g_i = int(np.argmin(d))
        if d[g_i] < threshold:
            taken[r_i][g_i] = True
            total += 1
            wrong += int(r.pred_labels[p_i]) != int(r.gt_labels[g_i])
    return wrong / total if total else 1.0


def nds(mAP: float, tp_errors: Sequence[float]) -> float:
    errs = list(tp_errors)
    if len(errs) != 5:
        raise ValueError(f"expected 5 TP errors, got {len(errs)}")
    return (5.0 * mAP + math.fsum(1.0 - min(1.0, e) for e in errs)) / 10.0


def agent_boxes_over_horizon(frame, steps: int) -> tuple:
    """Ground-truth agent footprints at each future step, ``(N, 5)`` rows of x, y, yaw, length, width."""
    out = []
    for k in range(steps):
        rows = []
        for a in frame.gt_agents:
            fut = frame.gt_futures.get(a.instance_id)
            if fut is None or k >= len(fut):
                continue
            rows.append((fut[k][0], fut[k][1], fut[k][2], a.anchor[L], a.anchor[W]))
        out.append(np.array(rows, dtype=float).reshape(-1, 5))
    return tuple(out)


def planning_record(frame, plan, prev_plan=None, prev_pose: Optional[Pose2D] = None) -> PlanningRecord:
    rel = relative_pose(frame.ego_pose, prev_pose) if prev_pose is not None else None
    p = np.asarray(plan, dtype=float)
    return PlanningRecord(p, np.asarray(frame.gt_ego_future, dtype=float), agent_boxes_over_horizon(frame, len(p)),
                          None if prev_plan is None else np.asarray(prev_plan, dtype=float), rel, frame.scene_id,
                          frame.index)


def detection_record(frame, detections, score_threshold: float = 0.0) -> DetectionRecord:
    dets = [d for d in detections if d.score >= score_threshold]
    return DetectionRecord(
        np.array([d.anchor for d in dets], dtype=float).reshape(-1, 11),
        np.array([d.label for d in dets], dtype=int),
        np.array([d.score for d in dets], dtype=float),
        np.array([a.anchor for a in frame.gt_agents], dtype=float).reshape(-1, 11),
        np.array([a.label for a in frame.gt_agents], dtype=int),
    )


def motion_record(frame, detections, agent_futures, score_threshold: float) -> MotionRecord:
    keep = [i for i, d in enumerate(detections) if d.score >= score_threshold]
    gts = [a for a in frame.gt_agents if a.instance_id in frame.gt_futures]
    return MotionRecord(
        np.array([detections[i].anchor[[X, Y]] for i in keep], dtype=float).reshape(-1, 2),
        tuple(agent_futures[i] for i in keep),
        np.array([a.anchor[[X, Y]] for a in gts], dtype=float).reshape(-1, 2),
        np.array([np.asarray(frame.gt_futures[a.instance_id])[:, :2] for a in gts], dtype=float).reshape(len(gts), -1, 2),
    )
