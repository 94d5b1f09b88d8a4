"""Toy training of the output heads on cached decoder features.

The decoder is frozen, so each frame is encoded once per round and the
heads (linear in their weights) are fit by full-batch Adam with analytic
gradients. One epoch is one full-batch step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ANCHOR_DIM, MOTION_STEPS, PLAN_STEPS, X, Y, Frame, FusionConfig
from .geometry import resample_polyline
from .heads import (
    MAP_POINTS,
    NUM_MODES,
    HeadParams,
    agent_phi,
    decode_boxes,
    heading_rotations,
    single_phi,
    softmax,
    step_coefficients,
)
from .losses import (
    DetectionLossWeights,
    chamfer_cost_matrix,
    detection_cost,
    focal_loss,
    focal_loss_grad,
    hungarian_match,
    oriented_target,
    sigmoid_focal_loss,
    softmax_backward,
)
from .planner import (
    FrameFeatures,
    PlannerParams,
    PlannerState,
    apply_heads,
    assemble_output,
    encode_frame,
    init_params,
    update_state,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    det_cls: float = 1.0
    det_reg: float = 0.25
    motion_reg: float = 1.0
    motion_cls: float = 0.5
    plan_reg: float = 1.0
    plan_cls: float = 0.5
    map_cls: float = 1.0
    map_reg: float = 0.25
    weight_decay: float = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    seed: int = 0
    use_radar: bool = True
    lr: float = 5e-3
    # linear learning-rate ramp; a full-size first Adam step overshoots the trajectory heads
    warmup_epochs: int = 50
    rounds: int = 2
    # epochs between polyline re-assignments; detections are re-matched every epoch
    map_rematch: int = 10
    fusion: FusionConfig = field(default_factory=FusionConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    matching: DetectionLossWeights = field(default_factory=DetectionLossWeights)


@dataclass(frozen=True, eq=False)
class CachedFrame:
    phi_agent: np.ndarray  # (N, Da)
    phi_ego: np.ndarray  # (De,)
    phi_map: np.ndarray  # (N_m, De)
    anchors: np.ndarray  # (N, 11) decoder output anchors
    polylines: np.ndarray  # (N_m, 20, 2)
    gt_labels: np.ndarray
    gt_boxes: np.ndarray
    gt_futures: np.ndarray  # (M, 24, 2), NaN rows when unknown
    ego_future: np.ndarray  # (12, 2)
    command: int
    map_labels: np.ndarray
    map_targets: np.ndarray  # (M_m, 20, 2)


def cache_frame(frame: Frame, ff: FrameFeatures, heads: HeadParams) -> CachedFrame:
    futures = np.full((len(frame.gt_agents), MOTION_STEPS, 2), np.nan)
    for j, a in enumerate(frame.gt_agents):
        fut = frame.gt_futures.get(a.instance_id)
        if fut is not None:
            futures[j] = np.asarray(fut, dtype=float)[:MOTION_STEPS, :2]
    return CachedFrame(
        phi_agent=agent_phi(ff.agent_features, ff.ego_feature, ff.anchors, heads.lifts),
        phi_ego=single_phi(ff.ego_feature, heads.lifts["ego"])[0],
        phi_map=single_phi(ff.map_features, heads.lifts["map"]),
        anchors=ff.anchors,
        polylines=ff.polylines,
        gt_labels=np.array([a.label for a in frame.gt_agents], dtype=int),
        gt_boxes=np.array([a.anchor for a in frame.gt_agents], dtype=float).reshape(-1, ANCHOR_DIM),
        gt_futures=futures,
        ego_future=np.asarray(frame.gt_ego_future, dtype=float)[:PLAN_STEPS, :2],
        command=int(frame.command),
        map_labels=np.array([p.label for p in frame.gt_map], dtype=int),
        map_targets=np.array([resample_polyline(p.waypoints, MAP_POINTS) for p in frame.gt_map]).reshape(-1, MAP_POINTS, 2),
    )


def encode_scene(frames: Sequence[Frame], params: PlannerParams, use_radar: bool) -> list[FrameFeatures]:
    """Streams one scene through the pipeline and keeps each frame's decoder outputs."""
    state = PlannerState(params)
    out = []
    for frame in frames:
        ff = encode_frame(frame, state, use_radar)
        heads_out = apply_heads(ff, params.heads)
        result = assemble_output(frame, heads_out)
        state = update_state(state, frame, ff, heads_out, result.plan)
        out.append(ff)
    return out


def _trajectory_terms(local_grad: np.ndarray, steps: int):
    """Back-propagates ``dL/d local positions`` (..., T, 2) to v0, acceleration and template steps."""
    c1, c2 = step_coefficients(steps)
    g_v0 = np.einsum("t,...td->...d", c1, local_grad)
    g_acc = np.einsum("t,...td->...d", c2, local_grad)
    # position t is the cumulative sum of template steps 0..t
    g_tmpl = np.flip(np.cumsum(np.flip(local_grad, axis=-2), axis=-2), axis=-2)
    return g_v0, g_acc, g_tmpl


def _mode_loss(modes: np.ndarray, logits: np.ndarray, gt: np.ndarray, w_reg: float, w_cls: float):
    """L1 on the lowest-ADE mode plus focal mode classification; returns loss and grads."""
    err = np.linalg.norm(modes - gt[None], axis=-1).mean(axis=1)
    k = int(np.argmin(err))
    diff = modes[k] - gt
    reg = float(np.mean(np.abs(diff)))
    g_modes = np.zeros_like(modes)
    g_modes[k] = w_reg * np.sign(diff) / diff.size
    probs = softmax(logits)
    probs = probs / probs.sum()
    cls = focal_loss(probs, k)
    g_logits = w_cls * softmax_backward(probs, focal_loss_grad(probs, k))
    return w_reg * reg + w_cls * cls, reg, cls, g_modes, g_logits


def frame_loss(arrays: dict, cf: CachedFrame, cfg: TrainConfig, map_pairs=None):
    """Total loss of one frame, its per-term breakdown, and gradients for every head array.

    ``map_pairs`` reuses an earlier polyline assignment; the chosen pairs are
    returned in ``terms["map_pairs"]``.
    """
    w = cfg.weights
    grads = {k: np.zeros_like(v) for k, v in arrays.items()}
    terms = {}
    n_cls = 3

    # detection
    out = cf.phi_agent @ arrays["det"]
    logits, deltas = out[:, :n_cls], out[:, n_cls:]
    boxes = cf.anchors + deltas
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits))
    n_gt = len(cf.gt_labels)
    pairs = hungarian_match(detection_cost(probs, boxes, cf.gt_labels, cf.gt_boxes, cfg.matching)).pairs if n_gt else ()
    targets = np.zeros_like(logits)
    for i, j in pairs:
        targets[i, cf.gt_labels[j]] = 1.0
    cls, g_logit = sigmoid_focal_loss(logits, targets)
    norm = max(1, n_gt)
    terms["det_cls"] = float(cls.sum()) / norm
    g_out = np.zeros_like(out)
    g_out[:, :n_cls] = w.det_cls * g_logit / norm
    reg = 0.0
    if pairs:
        pi = np.array([p[0] for p in pairs])
        gj = np.array([p[1] for p in pairs])
        diff = boxes[pi] - cf.gt_boxes[gj]
        reg = float(np.mean(np.abs(diff)))
        g_out[pi, n_cls:] = w.det_reg * np.sign(diff) / diff.size
    terms["det_reg"] = reg
    grads["det"] += cf.phi_agent.T @ g_out

    # agent motion, anchored at the decoded (stop-gradient) boxes
    m_loss = m_reg = m_cls = 0.0
    valid = [(i, j) for i, j in pairs if not np.isnan(cf.gt_futures[j, 0, 0])]
    if valid:
        idx = np.array([i for i, _ in valid])
        phi = cf.phi_agent[idx]
        raw = phi @ arrays["motion"]
        n = len(idx)
        dec = decode_boxes(cf.anchors[idx], deltas[idx])
        rot = heading_rotations(dec)
        tmpl = np.cumsum(arrays["motion.template"], axis=1)
        c1, c2 = step_coefficients(MOTION_STEPS)
        v0 = raw[:, : 2 * NUM_MODES].reshape(n, NUM_MODES, 2)
        acc = raw[:, 2 * NUM_MODES: 4 * NUM_MODES].reshape(n, NUM_MODES, 2)
        local = c1[None, None, :, None] * v0[:, :, None] + c2[None, None, :, None] * acc[:, :, None] + tmpl[None]
        modes = np.einsum("nij,nmtj->nmti", rot, local) + dec[:, None, None, [X, Y]]
        g_raw = np.zeros_like(raw)
        for r, (_, j) in enumerate(valid):
            loss, lr_, lc_, g_modes, g_logits = _mode_loss(modes[r], raw[r, 4 * NUM_MODES:], cf.gt_futures[j],
                                                           w.motion_reg, w.motion_cls)
            m_loss += loss
            m_reg += lr_
            m_cls += lc_
            g_local = np.einsum("ji,mtj->mti", rot[r], g_modes)
            g_v0, g_acc, g_tmpl = _trajectory_terms(g_local, MOTION_STEPS)
            g_raw[r, : 2 * NUM_MODES] = g_v0.reshape(-1) / n
            g_raw[r, 2 * NUM_MODES: 4 * NUM_MODES] = g_acc.reshape(-1) / n
            g_raw[r, 4 * NUM_MODES:] = g_logits / n
            grads["motion.template"] += g_tmpl / n
        grads["motion"] += phi.T @ g_raw
        m_reg, m_cls = m_reg / n, m_cls / n
    terms["motion_reg"], terms["motion_cls"] = m_reg, m_cls

    # ego plan for the frame's command
    raw = cf.phi_ego @ arrays["plan"]
    nc = raw.size // (5 * NUM_MODES)
    block = nc * NUM_MODES
    v0 = raw[: 2 * block].reshape(nc, NUM_MODES, 2)
    acc = raw[2 * block: 4 * block].reshape(nc, NUM_MODES, 2)
    logits = raw[4 * block:].reshape(nc, NUM_MODES)
    c1, c2 = step_coefficients(PLAN_STEPS)
    tmpl = np.cumsum(arrays["plan.template"], axis=2)
    c = cf.command
    modes = c1[None, :, None] * v0[c][:, None] + c2[None, :, None] * acc[c][:, None] + tmpl[c]
    _, p_reg, p_cls, g_modes, g_logits = _mode_loss(modes, logits[c], cf.ego_future, w.plan_reg, w.plan_cls)
    g_v0, g_acc, g_tmpl = _trajectory_terms(g_modes, PLAN_STEPS)
    g_raw = np.zeros_like(raw)
    g_raw[: 2 * block].reshape(nc, NUM_MODES, 2)[c] = g_v0
    g_raw[2 * block: 4 * block].reshape(nc, NUM_MODES, 2)[c] = g_acc
    g_raw[4 * block:].reshape(nc, NUM_MODES)[c] = g_logits
    grads["plan"] += np.outer(cf.phi_ego, g_raw)
    grads["plan.template"][c] += g_tmpl
    terms["plan_reg"], terms["plan_cls"] = p_reg, p_cls

    # map polylines
    out = cf.phi_map @ arrays["map"]
    k = 3
    m_logits = out[:, :k]
    polys = cf.polylines + out[:, k:].reshape(cf.polylines.shape)
    m_targets = np.zeros_like(m_logits)
    g_out = np.zeros_like(out)
    mreg = 0.0
    if len(cf.map_labels):
        mpairs = map_pairs if map_pairs is not None else \
            hungarian_match(chamfer_cost_matrix(list(polys), list(cf.map_targets))).pairs
        g_poly = np.zeros_like(polys)
        for i, j in mpairs:
            m_targets[i, cf.map_labels[j]] = 1.0
            diff = polys[i] - oriented_target(polys[i], cf.map_targets[j])
            mreg += float(np.mean(np.abs(diff))) / len(mpairs)
            g_poly[i] = w.map_reg * np.sign(diff) / diff.size / len(mpairs)
        g_out[:, k:] = g_poly.reshape(len(polys), -1)
    mcls, g_ml = sigmoid_focal_loss(m_logits, m_targets)
    mnorm = max(1, len(cf.map_labels))
    g_out[:, :k] = w.map_cls * g_ml / mnorm
    grads["map"] += cf.phi_map.T @ g_out
    terms["map_cls"], terms["map_reg"] = float(mcls.sum()) / mnorm, mreg
    pairs_used = mpairs if len(cf.map_labels) else ()

    total = (w.det_cls * terms["det_cls"] + w.det_reg * terms["det_reg"] + m_loss / max(1, len(valid))
             + w.plan_reg * p_reg + w.plan_cls * p_cls + w.map_cls * terms["map_cls"] + w.map_reg * mreg)
    return total, dict(terms, map_pairs=pairs_used), grads


def dataset_loss(arrays: dict, cache: Sequence[CachedFrame], cfg: TrainConfig, map_pairs: Optional[list] = None):
    """Mean frame loss plus L2 weight decay on the linear head matrices.

    When ``map_pairs`` is an empty list it is filled with fresh per-frame polyline
    assignments; a filled list is reused as is.
    """
    grads = {k: np.zeros_like(v) for k, v in arrays.items()}
    totals, terms = [], {}
    reuse = bool(map_pairs)
    for i, cf in enumerate(cache):
        t, tm, g = frame_loss(arrays, cf, cfg, map_pairs[i] if reuse else None)
        if map_pairs is not None and not reuse:
            map_pairs.append(tm["map_pairs"])
        del tm["map_pairs"]
        totals.append(t)
        for k, v in tm.items():
            terms.setdefault(k, []).append(v)
        for k in grads:
            grads[k] += g[k]
    n = max(1, len(cache))
    for k in grads:
        grads[k] /= n
    decay = 0.0
    for k in ("det", "motion", "plan", "map"):
        decay += float(np.sum(arrays[k][1:] ** 2))
        grads[k][1:] += 2.0 * cfg.weights.weight_decay * arrays[k][1:]
    total = math.fsum(totals) / n + cfg.weights.weight_decay * decay
    return total, {k: math.fsum(v) / n for k, v in terms.items()}, grads


@dataclass
class Adam:
    lr: float
    warmup: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, arrays: dict, grads: dict) -> dict:
        self.step += 1
        lr = self.lr * min(1.0, self.step / self.warmup) if self.warmup > 0 else self.lr
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g)) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, np.zeros_like(g)) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1 ** self.step)
            v_hat = v / (1 - self.beta2 ** self.step)
            out[k] = arrays[k] - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


@dataclass
class TrainResult:
    params: PlannerParams
    history: list  # per-epoch {"epoch", "loss", terms...}


def _check_finite(epoch: int, total: float, terms: dict) -> None:
    if not math.isfinite(total):
        bad = {k: v for k, v in terms.items() if not math.isfinite(v)}
        raise TrainingDiverged(f"non-finite loss at epoch {epoch}: total={total!r}, terms={bad or terms}")


def train(scenes: Sequence[Sequence[Frame]], cfg: TrainConfig, encoder: Optional[Callable] = None) -> TrainResult:
    """Fits the head weights; ``encoder(scenes, params, use_radar)`` may parallelise feature extraction."""
    frames = [f for s in scenes for f in s]
    if not frames:
        raise ValueError("no training frames")
    params = init_params(cfg.fusion, cfg.seed, frames)
    history: list = []
    if cfg.epochs <= 0:
        return TrainResult(params, history)
    encode = encoder or (lambda sc, p, r: [encode_scene(s, p, r) for s in sc])
    rounds = max(1, min(cfg.rounds, cfg.epochs))
    per_round = [cfg.epochs // rounds + (1 if r < cfg.epochs % rounds else 0) for r in range(rounds)]
    arrays = {k: v.copy() for k, v in params.heads.arrays.items()}
    opt = Adam(cfg.lr, cfg.warmup_epochs)
    epoch = 0
    for r, n_epochs in enumerate(per_round):
        feats = encode(scenes, params, cfg.use_radar)
        cache = [cache_frame(f, ff, params.heads) for s, fs in zip(scenes, feats) for f, ff in zip(s, fs)]
        map_pairs: list = []
        for k in range(n_epochs):
            if k % max(1, cfg.map_rematch) == 0:
                map_pairs = []
            total, terms, grads = dataset_loss(arrays, cache, cfg, map_pairs)
            _check_finite(epoch, total, terms)
            history.append({"epoch": epoch, "round": r, "loss": total, **terms})
            log.info("epoch %d loss %.6f", epoch, total)
            arrays = opt.update(arrays, grads)
            epoch += 1
        params = params.with_heads(params.heads.with_arrays(arrays))
    total, terms, _ = dataset_loss(arrays, cache, cfg)
    _check_finite(epoch, total, terms)
    history.append({"epoch": epoch, "round": len(per_round) - 1, "loss": total, **terms})
    log.info("final loss %.6f", total)
    return TrainResult(params, history)
