"""End-to-end toy pipeline: anchors, decoder, heads, re-scoring, plan selection and memory."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .core import (
    ANCHOR_DIM,
    AGENT_CLASSES,
    COS,
    MAP_CLASSES,
    MOTION_STEPS,
    PLAN_STEPS,
    SIN,
    VX,
    VY,
    VZ,
    X,
    Y,
    AgentInstance,
    DrivingCommand,
    Frame,
    FusionConfig,
    MapPolyline,
    Pose2D,
    Trajectory,
    TrajectorySet,
    relative_pose,
    rotate_vectors,
    transform_points,
)
from .fusion.layers import (
    DecoderParams,
    QueryState,
    RadarFeatures,
    aggregate_ego_query,
    ego_query_init,
    embed_anchors,
    embed_polylines,
    encode_radar_points,
    frustum_cross_attention,
    layer_norm,
    run_decoder,
    temporal_attention,
)
from .geometry import resample_polyline
from .heads import (
    MAP_POINTS,
    NUM_MODES,
    HeadParams,
    agent_phi,
    decode_boxes,
    detection_outputs,
    map_outputs,
    motion_outputs,
    plan_outputs,
    sigmoid,
    single_phi,
    softmax,
)

MEMORY_FRAMES = 3
CARRYOVER = 64
RESCORE_LAMBDA = 1.0
R_SAFE = 3.0


class KMeansResult(NamedTuple):
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    iterations: int


def kmeans(points, k: int, seed: int, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm from a seeded sample of distinct input rows.

    Stops at an assignment fixed point or after ``max_iter`` iterations. An empty
    cluster is re-seeded with the point farthest from its current centroid.
    """
    x = np.asarray(points, dtype=float)
    x = x.reshape(len(x), -1)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(x) < k:
        raise ValueError(f"need at least k={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(len(x), size=k, replace=False)].copy()
    labels = np.full(len(x), -1)
    it = 0
    for it in range(1, max_iter + 1):
        d = ((x[:, None, :] - centroids[None]) ** 2).sum(-1) if len(x) * k <= 4_000_000 else _chunked_sqdist(x, centroids)
        new = np.argmin(d, axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # only donors from clusters that keep at least one member, so no other cluster empties
            own = np.where(counts[new] > 1, d[np.arange(len(x)), new], -np.inf)
            far = int(np.argmax(own))
            counts[new[far]] -= 1
            counts[j] += 1
            new[far] = j
            d[far] = np.inf
            d[far, j] = 0.0
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            centroids[j] = x[labels == j].mean(axis=0)
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return KMeansResult(centroids, labels, inertia, it)


def _chunked_sqdist(x, c, chunk=2048):
    out = np.empty((len(x), len(c)))
    for s in range(0, len(x), chunk):
        out[s:s + chunk] = ((x[s:s + chunk, None, :] - c[None]) ** 2).sum(-1)
    return out


def kmeans_anchors(training_boxes, k: int, seed: int) -> np.ndarray:
    """K-means centroids of 11-parameter boxes; velocities zeroed and headings renormalised."""
    boxes = np.asarray([getattr(b, "anchor", b) for b in training_boxes], dtype=float).reshape(-1, ANCHOR_DIM)
    cent = kmeans(boxes, k, seed).centroids
    cent[:, [VX, VY, VZ]] = 0.0
    norm = np.hypot(cent[:, SIN], cent[:, COS])
    ok = norm > 1e-9
    cent[ok, SIN] /= norm[ok]
    cent[ok, COS] /= norm[ok]
    cent[~ok, SIN], cent[~ok, COS] = 0.0, 1.0
    return cent


def anchor_pool(boxes: np.ndarray, k: int, seed: int, jitter: float = 2.0) -> np.ndarray:
    """Training boxes, padded with position-jittered copies up to ``2 k`` rows when scarce."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, ANCHOR_DIM)
    if len(boxes) == 0:
        raise ValueError("no training boxes for anchor initialisation")
    need = 2 * k - len(boxes)
    if need <= 0:
        return boxes
    rng = np.random.default_rng([seed, 11])
    extra = boxes[rng.integers(len(boxes), size=need)].copy()
    extra[:, [X, Y]] += rng.normal(0.0, jitter, size=(need, 2))
    return np.concatenate([boxes, extra])


@dataclass(frozen=True, eq=False)
class PlannerParams:
    decoder: DecoderParams
    heads: HeadParams
    agent_anchors: np.ndarray  # (N_a, 11)
    map_anchors: np.ndarray  # (N_m, 20, 2)

    @property
    def config(self) -> FusionConfig:
        return self.decoder.config

    @property
    def num_trainable(self) -> int:
        return self.heads.num_parameters

    def with_heads(self, heads: HeadParams) -> "PlannerParams":
        return replace(self, heads=heads)

    def check(self, cfg: Optional[FusionConfig]) -> None:
        """Raise when ``cfg`` disagrees with the dimensions baked into the parameters."""
        problems = []
        own = self.config
        if cfg is not None:
            for name in ("embed_dim", "num_agent_anchors", "num_map_anchors", "num_decoder_layers", "num_heads"):
                a, b = getattr(cfg, name), getattr(own, name)
                if a != b:
                    problems.append(f"{name}: config {a} vs params {b}")
        if self.agent_anchors.shape != (own.num_agent_anchors, ANCHOR_DIM):
            problems.append(f"agent anchors {self.agent_anchors.shape} vs ({own.num_agent_anchors}, {ANCHOR_DIM})")
        if self.map_anchors.shape != (own.num_map_anchors, MAP_POINTS, 2):
            problems.append(f"map anchors {self.map_anchors.shape} vs ({own.num_map_anchors}, {MAP_POINTS}, 2)")
        if self.heads.embed_dim != own.embed_dim:
            problems.append(f"head embed_dim {self.heads.embed_dim} vs decoder {own.embed_dim}")
        if problems:
            raise ValueError("parameter/config mismatch: " + "; ".join(problems))


def init_params(cfg: FusionConfig, seed: int, training_frames: Sequence[Frame]) -> PlannerParams:
    """Seeded decoder and heads with anchors clustered from the training ground truth."""
    problems = cfg.validate()
    if problems:
        raise ValueError("invalid fusion config: " + "; ".join(problems))
    boxes = [np.asarray(a.anchor) for f in training_frames for a in f.gt_agents]
    agent_anchors = kmeans_anchors(anchor_pool(np.array(boxes).reshape(-1, ANCHOR_DIM), cfg.num_agent_anchors, seed),
                                   cfg.num_agent_anchors, seed)
    polys = [resample_polyline(p.waypoints, MAP_POINTS) for f in training_frames for p in f.gt_map]
    if len(polys) < cfg.num_map_anchors:
        rng = np.random.default_rng([seed, 12])
        base = np.array(polys).reshape(-1, MAP_POINTS, 2) if polys else np.zeros((1, MAP_POINTS, 2))
        extra = base[rng.integers(len(base), size=cfg.num_map_anchors - len(polys))]
        extra = extra + rng.normal(0.0, 2.0, size=(len(extra), 1, 2))
        polys = list(base[: len(polys)]) + list(extra)
    map_anchors = kmeans(np.array(polys).reshape(len(polys), -1), cfg.num_map_anchors, seed).centroids
    return PlannerParams(DecoderParams.init(cfg, seed), HeadParams.init(seed, cfg.embed_dim), agent_anchors,
                         map_anchors.reshape(cfg.num_map_anchors, MAP_POINTS, 2))


@dataclass(frozen=True, eq=False)
class MemoryEntry:
    boxes: np.ndarray  # (K, 11) in that frame's ego frame
    features: np.ndarray  # (K, C)
    pose: Pose2D
    timestamp: float


@dataclass(frozen=True, eq=False)
class PlannerState:
    params: PlannerParams
    memory: tuple[MemoryEntry, ...] = ()
    prev_plan: Optional[Trajectory] = None
    prev_pose: Optional[Pose2D] = None
    prev_timestamp: Optional[float] = None


@dataclass(frozen=True, eq=False)
class PipelineOutput:
    detections: list  # AgentInstance, ordered by descending score
    map: list  # MapPolyline
    agent_futures: list  # TrajectorySet per detection
    ego_plans: Mapping  # DrivingCommand -> re-scored TrajectorySet
    plan: Trajectory
    command: DrivingCommand


def propagate_boxes(boxes: np.ndarray, src_pose: Pose2D, src_time: float, dst_pose: Pose2D,
                    dst_time: float) -> np.ndarray:
    """Constant-velocity prediction to ``dst_time`` then re-expression in the ``dst_pose`` ego frame."""
    b = np.array(boxes, dtype=float).reshape(-1, ANCHOR_DIM)
    if len(b) == 0:
        return b
    dt = dst_time - src_time
    b[:, [X, Y]] += b[:, [VX, VY]] * dt
    rel = relative_pose(dst_pose, src_pose)
    b[:, [X, Y]] = transform_points(b[:, [X, Y]], rel)
    b[:, [VX, VY]] = rotate_vectors(b[:, [VX, VY]], rel.yaw)
    c, s = math.cos(rel.yaw), math.sin(rel.yaw)
    sin, cos = b[:, SIN].copy(), b[:, COS].copy()
    b[:, SIN] = s * cos + c * sin
    b[:, COS] = c * cos - s * sin
    return b


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    """Decoder outputs for one frame; the heads are a deterministic function of these."""

    anchors: np.ndarray
    agent_features: np.ndarray
    ego_feature: np.ndarray
    polylines: np.ndarray
    map_features: np.ndarray


def encode_frame(frame: Frame, state: PlannerState, use_radar: bool = True) -> FrameFeatures:
    """Radar encoding, frustum fusion, ego query, temporal memory and the decoder stack."""
    params = state.params
    dec = params.decoder
    cfg = dec.config
    radar = encode_radar_points(frame.radar_array(), dec) if use_radar else RadarFeatures.empty(cfg.embed_dim)
    grids = frustum_cross_attention(frame.camera_grids, radar, frame.cameras, dec)
    ego = layer_norm(ego_query_init(grids)) if len(grids) else np.zeros(cfg.embed_dim)
    ego = layer_norm(aggregate_ego_query(ego, radar, dec))

    anchors = params.agent_anchors.copy()
    feats = embed_anchors(anchors, dec)
    mem_boxes, mem_feats = [], []
    for k, entry in enumerate(reversed(state.memory)):
        b = propagate_boxes(entry.boxes, entry.pose, entry.timestamp, frame.ego_pose, frame.timestamp)
        mem_boxes.append(b)
        mem_feats.append(entry.features)
        if k == 0 and len(b):
            # the most recent frame's instances replace the tail of the anchor set
            n = min(len(b), len(anchors))
            anchors[-n:] = b[:n]
            feats[-n:] = entry.features[:n]
    if mem_boxes:
        feats = temporal_attention(anchors, feats, np.concatenate(mem_boxes), np.concatenate(mem_feats), dec)
    polys = params.map_anchors.copy()
    qs = QueryState(anchors, feats, polys, embed_polylines(polys, dec))
    qs = run_decoder(qs, radar, grids, frame.cameras, dec)
    return FrameFeatures(qs.anchors, qs.agent_features, ego, qs.polylines, qs.map_features)


@dataclass(frozen=True, eq=False)
class HeadOutputs:
    boxes: np.ndarray  # (N, 11)
    class_probs: np.ndarray  # (N, 3)
    agent_modes: np.ndarray  # (N, 6, 24, 2)
    agent_mode_probs: np.ndarray  # (N, 6)
    plan_modes: np.ndarray  # (3, 6, 12, 2)
    plan_probs: np.ndarray  # (3, 6)
    map_waypoints: np.ndarray  # (N_m, 20, 2)
    map_probs: np.ndarray  # (N_m, 3)


def apply_heads(ff: FrameFeatures, heads: HeadParams) -> HeadOutputs:
    phi = agent_phi(ff.agent_features, ff.ego_feature, ff.anchors, heads.lifts)
    logits, deltas = detection_outputs(phi, heads)
    boxes = decode_boxes(ff.anchors, deltas)
    modes, mode_logits = motion_outputs(phi, boxes, heads)
    phi_e = single_phi(ff.ego_feature, heads.lifts["ego"])
    plan, plan_logits = plan_outputs(phi_e, heads)
    map_logits, waypoints = map_outputs(single_phi(ff.map_features, heads.lifts["map"]), ff.polylines, heads)
    return HeadOutputs(boxes, sigmoid(logits), modes, softmax(mode_logits), plan, softmax(plan_logits),
                       waypoints, sigmoid(map_logits))


def trajectory_head(instance_feature, anchor, params, horizon: int, ego_feature=None):
    """Multi-modal futures for one instance.

    ``horizon == 24`` gives the 6 agent modes starting at ``anchor``; ``horizon == 12``
    gives the ego modes as a mapping from command to a 6-mode set.
    """
    heads = params.heads if isinstance(params, PlannerParams) else params
    f = np.asarray(instance_feature, dtype=float).reshape(1, -1)
    if horizon == MOTION_STEPS:
        e = np.zeros(f.shape[1]) if ego_feature is None else ego_feature
        a = np.asarray(anchor, dtype=float).reshape(1, ANCHOR_DIM)
        modes, logits = motion_outputs(agent_phi(f, e, a, heads.lifts), a, heads, horizon)
        return TrajectorySet(modes[0], softmax(logits[0]))
    if horizon == PLAN_STEPS:
        modes, logits = plan_outputs(single_phi(f, heads.lifts["ego"]), heads, horizon)
        origin = np.asarray(anchor, dtype=float).reshape(-1)[:2] if anchor is not None else np.zeros(2)
        probs = softmax(logits)
        return {cmd: TrajectorySet(modes[int(cmd)] + origin, probs[int(cmd)]) for cmd in DrivingCommand}
    raise ValueError(f"horizon must be {PLAN_STEPS} or {MOTION_STEPS} points, got {horizon}")


def rescore_trajectories(ego_modes: TrajectorySet, agent_futures: Sequence[TrajectorySet],
                         lam: float = RESCORE_LAMBDA, r_safe: float = R_SAFE) -> TrajectorySet:
    """Penalise ego modes passing within ``r_safe`` of any agent's top-scored mode.

    Each mode loses ``lam * sum_t max(0, r_safe - d_t)`` with ``d_t`` the distance to
    the nearest agent at timestep ``t`` over the common horizon.
    """
    modes = np.asarray(ego_modes.modes, dtype=float)
    scores = np.asarray(ego_modes.scores, dtype=float).copy()
    if not len(agent_futures) or not len(modes):
        return TrajectorySet(modes, scores)
    best = [np.asarray(a.modes[int(np.argmax(a.scores))], dtype=float) for a in agent_futures]
    t = min(modes.shape[1], min(len(b) for b in best))
    agents = np.stack([b[:t, :2] for b in best])  # (A, T, 2)
    d = np.linalg.norm(modes[:, None, :t, :2] - agents[None], axis=-1).min(axis=1)  # (M, T)
    scores -= lam * np.maximum(0.0, r_safe - d).sum(axis=1)
    return TrajectorySet(modes, scores)


def select_plan(modes, command: DrivingCommand) -> Trajectory:
    """Highest-scoring mode for ``command``; the lowest index wins ties."""
    ts = modes[command] if isinstance(modes, Mapping) else modes
    if ts is None or len(ts.modes) == 0:
        raise ValueError(f"no plan modes for command {DrivingCommand(command).name}")
    i = int(np.argmax(ts.scores))
    return Trajectory(np.asarray(ts.modes[i]), float(ts.scores[i]))


@dataclass(frozen=True)
class PostProcess:
    max_detections: int = 300
    nms_radius: float = 1.0
    rescore_threshold: float = 0.3


def select_detections(boxes: np.ndarray, scores: np.ndarray, post: PostProcess) -> np.ndarray:
    """Greedy score-ordered BEV centre suppression; returns kept indices."""
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    kept_xy = np.zeros((0, 2))
    for i in order:
        if len(keep) >= post.max_detections:
            break
        xy = boxes[i, [X, Y]]
        if len(kept_xy) and np.min(np.hypot(*(kept_xy - xy).T)) < post.nms_radius:
            continue
        keep.append(int(i))
        kept_xy = np.vstack([kept_xy, xy])
    return np.array(keep, dtype=int)


def assemble_output(frame: Frame, out: HeadOutputs, post: PostProcess = PostProcess()) -> PipelineOutput:
    scores = out.class_probs.max(axis=1)
    keep = select_detections(out.boxes, scores, post)
    detections = [AgentInstance(out.boxes[i], class_scores=out.class_probs[i], instance_id=int(i)) for i in keep]
    futures = [TrajectorySet(out.agent_modes[i], out.agent_mode_probs[i]) for i in keep]
    confident = [f for f, i in zip(futures, keep) if scores[i] >= post.rescore_threshold]
    plans = {cmd: rescore_trajectories(TrajectorySet(out.plan_modes[int(cmd)], out.plan_probs[int(cmd)]), confident)
             for cmd in DrivingCommand}
    polylines = [MapPolyline(out.map_waypoints[i], class_scores=out.map_probs[i]) for i in range(len(out.map_probs))]
    return PipelineOutput(detections, polylines, futures, plans, select_plan(plans, frame.command), frame.command)


def update_state(state: PlannerState, frame: Frame, ff: FrameFeatures, out: HeadOutputs, plan: Trajectory) -> PlannerState:
    scores = out.class_probs.max(axis=1)
    top = np.argsort(-scores, kind="stable")[:CARRYOVER]
    entry = MemoryEntry(out.boxes[top].copy(), ff.agent_features[top].copy(), frame.ego_pose, frame.timestamp)
    memory = (state.memory + (entry,))[-MEMORY_FRAMES:]
    return PlannerState(state.params, memory, plan, frame.ego_pose, frame.timestamp)


def run_frame(frame: Frame, state: PlannerState, cfg: Optional[FusionConfig] = None, use_radar: bool = True,
              post: PostProcess = PostProcess()):
    """One streaming step; returns ``(PipelineOutput, next PlannerState)``."""
    state.params.check(cfg)
    ff = encode_frame(frame, state, use_radar)
    out = apply_heads(ff, state.params.heads)
    result = assemble_output(frame, out, post)
    return result, update_state(state, frame, ff, out, result.plan)


def oracle_output(frame: Frame) -> PipelineOutput:
    """Ground-truth passthrough used to validate the metric stack independently of training."""
    dets, futures = [], []
    for a in frame.gt_agents:
        dets.append(AgentInstance(np.asarray(a.anchor, dtype=float), class_scores=np.asarray(a.class_scores, dtype=float),
                                  instance_id=a.instance_id))
        fut = frame.gt_futures.get(a.instance_id)
        pts = np.asarray(fut, dtype=float)[:, :2] if fut is not None else np.repeat(
            np.asarray(a.anchor)[None, [X, Y]], MOTION_STEPS, axis=0)
        futures.append(TrajectorySet(pts[None], np.ones(1)))
    ego = np.asarray(frame.gt_ego_future, dtype=float)[:, :2]
    plans = {cmd: TrajectorySet(ego[None], np.ones(1)) for cmd in DrivingCommand}
    polys = [MapPolyline(np.asarray(p.waypoints, dtype=float), class_scores=np.asarray(p.class_scores, dtype=float))
             for p in frame.gt_map]
    return PipelineOutput(dets, polys, futures, plans, Trajectory(ego, 1.0), frame.command)
