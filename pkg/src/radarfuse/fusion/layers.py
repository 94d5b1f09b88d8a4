"""Radar encoding, query aggregation, frustum fusion and the decoder block.

Every operation is a pure function of its inputs and a read-only ``DecoderParams``.
An empty radar set leaves every feature untouched, so the camera-only model is
the same network evaluated with no radar points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import COS, SIN, W, H, L, X, Y, Z, FusionConfig, radar_array
from ..geometry import CameraModel, bilinear_sample, project_points

ENCODER_INPUTS = 8
ENCODER_HIDDEN = 64
NUM_KEYPOINTS = 7
MAP_KEYPOINTS = 5


@dataclass(frozen=True, eq=False)
class RadarFeatures:
    """Encoded radar points: ``features (M, C)`` at ``positions (M, 3)``."""

    features: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return len(self.features)

    @classmethod
    def empty(cls, dim: int) -> "RadarFeatures":
        return cls(np.zeros((0, dim)), np.zeros((0, 3)))


@dataclass(frozen=True, eq=False)
class DecoderParams:
    """Seeded weights for the encoder, fusion attentions and decoder layers."""

    seed: int
    config: FusionConfig
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    @property
    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    @classmethod
    def init(cls, config: FusionConfig, seed: int) -> "DecoderParams":
        rng = np.random.default_rng([seed, 7001])
        c = config.embed_dim
        arrays: dict[str, np.ndarray] = {}

        def dense(name, n_in, n_out, gain=1.0):
            arrays[name] = rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out))

        def attention(prefix):
            for w in ("wq", "wk", "wv"):
                dense(f"{prefix}.{w}", c, c)
            dense(f"{prefix}.wo", c, c, gain=0.5)

        dense("encoder.w1", ENCODER_INPUTS, ENCODER_HIDDEN, gain=2.0)
        arrays["encoder.b1"] = rng.normal(0.0, 0.5, size=ENCODER_HIDDEN)
        dense("encoder.w2", ENCODER_HIDDEN, c)
        dense("encoder.skip", ENCODER_INPUTS, c, gain=2.0)
        arrays["embed.freq"] = rng.normal(0.0, 1.0 / 8.0, size=(2, c // 2))
        dense("embed.shape", 6, c)
        attention("frustum")
        attention("temporal")
        attention("ego.radar")
        for i in range(config.num_decoder_layers):
            p = f"layer{i}"
            attention(f"{p}.radar_agent")
            attention(f"{p}.radar_map")
            attention(f"{p}.self")
            arrays[f"{p}.deform.agent_logits"] = rng.normal(0.0, 0.5, size=NUM_KEYPOINTS)
            arrays[f"{p}.deform.map_logits"] = rng.normal(0.0, 0.5, size=MAP_KEYPOINTS)
            dense(f"{p}.deform.wo", c, c, gain=0.5)
            dense(f"{p}.ffn.w1", c, 2 * c)
            dense(f"{p}.ffn.w2", 2 * c, c, gain=0.5)
            # refinement deltas start at zero: anchors are only moved by trained heads
            arrays[f"{p}.refine.agent"] = np.zeros((c, 11))
            arrays[f"{p}.refine.map"] = np.zeros((c, 40))
        return cls(seed, config, arrays)


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


def _lift_radar(arr: np.ndarray, r_max: float) -> np.ndarray:
    x, y, z, rcs, dop, off = arr.T
    rng_xy = np.hypot(x, y)
    safe = np.where(rng_xy > 1e-6, rng_xy, 1.0)
    # Doppler also enters as a radial velocity vector along the line of sight
    return np.stack([x / r_max, y / r_max, z / 5.0, rcs / 10.0, dop / 10.0, off / 0.5,
                     dop * x / safe / 10.0, dop * y / safe / 10.0], axis=1)


def encode_radar_points(points, params: DecoderParams) -> RadarFeatures:
    """Per-point two-layer feed-forward encoding of position, RCS, Doppler and sweep offset."""
    arr = points if isinstance(points, np.ndarray) else radar_array(points)
    arr = np.asarray(arr, dtype=float).reshape(-1, 6)
    c = params.config.embed_dim
    if len(arr) == 0:
        return RadarFeatures.empty(c)
    if not np.all(np.isfinite(arr)):
        raise ValueError("radar point attributes must be finite")
    lifted = _lift_radar(arr, params.config.r_max)
    hidden = np.maximum(lifted @ params["encoder.w1"] + params["encoder.b1"], 0.0)
    feats = hidden @ params["encoder.w2"] + lifted @ params["encoder.skip"]
    return RadarFeatures(feats, arr[:, :3].copy())


def _local_attention(queries, keys, values, dist, mask, params, prefix, alpha, r_max, heads):
    """Multi-head range-adaptive attention over per-query key sets.

    ``keys``/``values`` are ``(N, K, C)``; the distance penalty is shared by all heads.
    Rows without a valid key produce zeros.
    """
    n, k, c = keys.shape
    dh = c // heads
    q = (queries @ params[f"{prefix}.wq"]).reshape(n, heads, dh)
    kk = (keys @ params[f"{prefix}.wk"]).reshape(n, k, heads, dh)
    vv = (values @ params[f"{prefix}.wv"]).reshape(n, k, heads, dh)
    logits = np.einsum("nhd,nkhd->nhk", q, kk) / np.sqrt(dh) - alpha * dist[:, None, :] / r_max
    logits = np.where(mask[:, None, :], logits, -np.inf)
    m = logits.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    z = e.sum(axis=-1, keepdims=True)
    w = e / np.where(z > 0, z, 1.0)
    out = np.einsum("nhk,nkhd->nhd", w, vv).reshape(n, c)
    return out @ params[f"{prefix}.wo"], w


@dataclass(frozen=True, eq=False)
class KeySelection:
    """Nearest radar keys per query: indices, distances and within-radius mask, ``(N, k)`` each."""

    idx: np.ndarray
    dist: np.ndarray
    mask: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return self.mask.any(axis=1)


def select_keys(dist: np.ndarray, cfg: FusionConfig) -> KeySelection:
    """Keep the ``topk_radar`` nearest keys per row, ordered by (distance, index)."""
    n, m = dist.shape
    if m == 0 or n == 0:
        z = np.zeros((n, 0))
        return KeySelection(z.astype(int), z, z.astype(bool))
    k = min(cfg.topk_radar, m)
    if k < m:
        idx = np.sort(np.argpartition(dist, k - 1, axis=1)[:, :k], axis=1)
    else:
        idx = np.broadcast_to(np.arange(m), (n, k)).copy()
    d = np.take_along_axis(dist, idx, axis=1)
    order = np.argsort(d, axis=1, kind="stable")
    idx = np.take_along_axis(idx, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    return KeySelection(idx, d, d <= cfg.query_radius)


def _attend_selected(features, sel: KeySelection, radar: RadarFeatures, params, prefix, cfg: FusionConfig):
    """Residual range-adaptive attention over pre-selected keys; returns (features, weights)."""
    n, k = sel.idx.shape
    active = sel.active
    if k == 0 or not active.any():
        return features.copy(), np.zeros((n, k))
    keys = radar.features[sel.idx[active]]
    delta, w = _local_attention(features[active], keys, keys, sel.dist[active], sel.mask[active], params, prefix,
                                cfg.alpha, cfg.r_max, cfg.num_heads)
    out = features.copy()
    out[active] = features[active] + delta
    weights = np.zeros((n, k))
    weights[active] = w.mean(axis=1)
    return out, weights


def agent_key_selection(anchors, radar: RadarFeatures, cfg: FusionConfig) -> KeySelection:
    """Keys by 3D distance from each anchor centre."""
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 11)
    if len(radar) == 0:
        return select_keys(np.zeros((len(anchors), 0)), cfg)
    diff = anchors[:, None, [X, Y, Z]] - radar.positions[None, :, :]
    return select_keys(np.sqrt(np.sum(diff * diff, axis=-1)), cfg)


def map_key_selection(polylines, radar: RadarFeatures, cfg: FusionConfig) -> KeySelection:
    """Keys by BEV point-to-polyline distance.

    Only pairs whose point lies within ``query_radius`` of the polyline's bounding
    box are measured; other pairs can never be attended to and get ``inf``.
    """
    polys = np.asarray(polylines, dtype=float)
    if len(radar) == 0 or len(polys) == 0:
        return select_keys(np.zeros((len(polys), 0)), cfg)
    pts = radar.positions[:, :2]
    lo = polys.min(axis=1) - cfg.query_radius
    hi = polys.max(axis=1) + cfg.query_radius
    cand = np.all((pts[None] >= lo[:, None]) & (pts[None] <= hi[:, None]), axis=-1)  # (P, M)
    dist = np.full(cand.shape, np.inf)
    pi, mi = np.nonzero(cand)
    if len(pi):
        a = polys[pi, :-1]  # (n_pairs, S, 2)
        ab = polys[pi, 1:] - a
        ap = pts[mi][:, None, :] - a
        denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-18)
        t = np.clip(np.sum(ap * ab, axis=-1) / denom, 0.0, 1.0)
        diff = ap - t[..., None] * ab
        dist[pi, mi] = np.sqrt(np.sum(diff * diff, axis=-1)).min(axis=1)
    return select_keys(dist, cfg)


def aggregate_agent_queries(anchors, features, radar: RadarFeatures, params: DecoderParams,
                            prefix: str = "layer0.radar_agent", return_weights: bool = False, selection=None):
    """Fuse the nearest radar features into each agent query (distance to the anchor centre)."""
    features = np.asarray(features, dtype=float)
    sel = agent_key_selection(anchors, radar, params.config) if selection is None else selection
    out, w = _attend_selected(features, sel, radar, params, prefix, params.config)
    return (out, w) if return_weights else out


def aggregate_map_queries(polylines, features, radar: RadarFeatures, params: DecoderParams,
                          prefix: str = "layer0.radar_map", return_weights: bool = False, selection=None):
    """Fuse radar features into map queries using the BEV point-to-polyline distance."""
    features = np.asarray(features, dtype=float)
    sel = map_key_selection(polylines, radar, params.config) if selection is None else selection
    out, w = _attend_selected(features, sel, radar, params, prefix, params.config)
    return (out, w) if return_weights else out


def cell_centers(grid_shape, cam: CameraModel) -> np.ndarray:
    """Pixel coordinates ``(H*W, 2)`` of grid cell centres."""
    h, w = grid_shape[:2]
    sx, sy = cam.width / w, cam.height / h
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    return np.stack([(jj.ravel() + 0.5) * sx, (ii.ravel() + 0.5) * sy], axis=1)


def frustum_cross_attention(grids, radar: RadarFeatures, cams, params: DecoderParams):
    """Let image cells attend to radar features projected within a pixel radius."""
    cfg = params.config
    out = []
    for grid, cam in zip(grids, cams):
        grid = np.asarray(grid, dtype=float)
        if len(radar) == 0:
            out.append(grid.copy())
            continue
        uv, _, inside = project_points(radar.positions, cam)
        if not inside.any():
            out.append(grid.copy())
            continue
        uv, keys = uv[inside], radar.features[inside]
        h, w, c = grid.shape
        cells = grid.reshape(-1, c)
        centers = cell_centers(grid.shape, cam)
        dist = np.linalg.norm(centers[:, None, :] - uv[None, :, :], axis=-1)
        mask = dist <= cfg.frustum_radius_px
        active = mask.any(axis=1)
        enriched = cells.copy()
        if active.any():
            n_act = int(active.sum())
            kb = np.broadcast_to(keys, (n_act,) + keys.shape)
            delta, _ = _local_attention(cells[active], kb, kb, dist[active], mask[active], params,
                                        "frustum", cfg.alpha, cfg.frustum_radius_px, cfg.num_heads)
            enriched[active] = cells[active] + delta
        out.append(enriched.reshape(h, w, c))
    return out


def ego_query_init(grids) -> np.ndarray:
    """Average-pool every cell of every camera grid into one ego feature."""
    cells = [np.asarray(g, dtype=float).reshape(-1, np.shape(g)[-1]) for g in grids if np.size(g)]
    if not cells:
        raise ValueError("ego query initialisation needs at least one non-empty grid")
    stacked = np.concatenate(cells, axis=0)
    return stacked.sum(axis=0) / len(stacked)


def aggregate_ego_query(ego_feature, radar: RadarFeatures, params: DecoderParams) -> np.ndarray:
    """Ego query attends to every radar point within ``r_max`` of the ego origin."""
    ego = np.asarray(ego_feature, dtype=float)
    if len(radar) == 0:
        return ego.copy()
    cfg = params.config
    dist = np.linalg.norm(radar.positions, axis=1)[None]
    mask = dist <= cfg.r_max
    if not mask.any():
        return ego.copy()
    keys = radar.features[None]
    delta, _ = _local_attention(ego[None], keys, keys, dist, mask, params, "ego.radar", cfg.alpha, cfg.r_max,
                                cfg.num_heads)
    return ego + delta[0]


def anchor_keypoints(anchors) -> np.ndarray:
    """Centre plus the six face centres of each box, ``(N, 7, 3)``."""
    a = np.asarray(anchors, dtype=float)
    half = 0.5 * np.stack([a[:, L], a[:, W], a[:, H]], axis=1)
    local = np.zeros((len(a), NUM_KEYPOINTS, 3))
    for k in range(3):
        local[:, 1 + 2 * k, k] = half[:, k]
        local[:, 2 + 2 * k, k] = -half[:, k]
    norm = np.hypot(a[:, SIN], a[:, COS])
    norm = np.where(norm > 0, norm, 1.0)
    s, c = a[:, SIN] / norm, a[:, COS] / norm
    kp = np.empty_like(local)
    kp[..., 0] = c[:, None] * local[..., 0] - s[:, None] * local[..., 1] + a[:, None, X]
    kp[..., 1] = s[:, None] * local[..., 0] + c[:, None] * local[..., 1] + a[:, None, Y]
    kp[..., 2] = local[..., 2] + a[:, None, Z]
    return kp


def keypoint_samples(keypoints, grids, cams):
    """Per-keypoint features averaged over the cameras that see them.

    Returns ``(mean (N, K, C), seen (N, K) bool)``.
    """
    n, k, _ = keypoints.shape
    c = np.shape(grids[0])[-1] if len(grids) else 0
    acc = np.zeros((n, k, c))
    hits = np.zeros((n, k))
    flat = keypoints.reshape(-1, 3)
    for grid, cam in zip(grids, cams):
        uv, _, inside = project_points(flat, cam)
        if not inside.any():
            continue
        gh, gw = np.shape(grid)[:2]
        g_uv = np.stack([uv[inside, 0] * gw / cam.width - 0.5, uv[inside, 1] * gh / cam.height - 0.5], axis=1)
        acc.reshape(-1, c)[inside] += bilinear_sample(grid, g_uv)
        hits.reshape(-1)[inside] += 1.0
    return acc / np.maximum(hits, 1.0)[..., None], hits > 0


def map_keypoints(polylines) -> np.ndarray:
    polys = np.asarray(polylines, dtype=float)
    pick = np.linspace(0, polys.shape[1] - 1, MAP_KEYPOINTS).round().astype(int)
    return np.concatenate([polys[:, pick], np.zeros((len(polys), MAP_KEYPOINTS, 1))], axis=2)


@dataclass(frozen=True, eq=False)
class FrameGeometry:
    """Layer-independent lookups for one set of anchors, polylines, radar points and grids."""

    anchors: np.ndarray
    polylines: np.ndarray
    agent_keys: KeySelection
    map_keys: KeySelection
    agent_samples: tuple
    map_samples: tuple

    @classmethod
    def build(cls, anchors, polylines, radar: RadarFeatures, grids, cams, cfg: FusionConfig) -> "FrameGeometry":
        anchors = np.asarray(anchors, dtype=float)
        polylines = np.asarray(polylines, dtype=float)
        if len(grids):
            a_s = keypoint_samples(anchor_keypoints(anchors), grids, cams) if len(anchors) else None
            m_s = keypoint_samples(map_keypoints(polylines), grids, cams) if len(polylines) else None
        else:
            a_s = m_s = None
        return cls(anchors, polylines, agent_key_selection(anchors, radar, cfg),
                   map_key_selection(polylines, radar, cfg), a_s, m_s)

    def matches(self, state: "QueryState", atol: float = 1e-12) -> bool:
        # heading renormalisation can move sin/cos by an ulp without changing any lookup
        if self.anchors.shape != np.shape(state.anchors) or self.polylines.shape != np.shape(state.polylines):
            return False
        return bool(np.allclose(self.anchors, state.anchors, rtol=0.0, atol=atol)
                    and np.allclose(self.polylines, state.polylines, rtol=0.0, atol=atol))


def _weighted_samples(samples, logits) -> np.ndarray:
    mean, seen = samples
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    return np.einsum("k,nkc->nc", w, mean * seen[..., None])


def deformable_aggregation(anchors, polylines, agent_feat, map_feat, grids, cams, params, prefix, geometry=None):
    """Add softmax-weighted keypoint samples from the camera grids to agent and map queries."""
    if not len(grids):
        return agent_feat, map_feat
    wo = params[f"{prefix}.deform.wo"]
    agent_out, map_out = agent_feat, map_feat
    if len(agent_feat):
        samples = geometry.agent_samples if geometry is not None else keypoint_samples(anchor_keypoints(anchors), grids, cams)
        agent_out = agent_feat + _weighted_samples(samples, params[f"{prefix}.deform.agent_logits"]) @ wo
    if len(map_feat):
        samples = geometry.map_samples if geometry is not None else keypoint_samples(map_keypoints(polylines), grids, cams)
        map_out = map_feat + _weighted_samples(samples, params[f"{prefix}.deform.map_logits"]) @ wo
    return agent_out, map_out


def self_attention(features, params, prefix, heads) -> np.ndarray:
    """Full multi-head self-attention with a residual connection.

    The score matrix is the largest tensor in the decoder, so it is formed in
    float32; results are returned in float64.
    """
    n, c = features.shape
    if n == 0:
        return features
    dh = c // heads
    x = features.astype(np.float32)

    def proj(name):
        return (x @ params[f"{prefix}.{name}"].astype(np.float32)).reshape(n, heads, dh).transpose(1, 0, 2)

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    s = q @ k.transpose(0, 2, 1)
    s *= np.float32(1.0 / np.sqrt(dh))
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    out = (s @ v).transpose(1, 0, 2).reshape(n, c).astype(np.float64)
    return features + out @ params[f"{prefix}.wo"]


def feed_forward(features, params, prefix) -> np.ndarray:
    hidden = np.maximum(features @ params[f"{prefix}.ffn.w1"], 0.0)
    return features + hidden @ params[f"{prefix}.ffn.w2"]


def normalize_yaw(anchors: np.ndarray) -> np.ndarray:
    out = anchors.copy()
    norm = np.hypot(out[:, SIN], out[:, COS])
    bad = norm < 1e-9
    norm[bad] = 1.0
    out[:, SIN] /= norm
    out[:, COS] /= norm
    out[bad, SIN], out[bad, COS] = 0.0, 1.0
    return out


@dataclass(frozen=True, eq=False)
class QueryState:
    """Agent and map queries threaded through the decoder."""

    anchors: np.ndarray  # (N_d, 11)
    agent_features: np.ndarray  # (N_d, C)
    polylines: np.ndarray  # (N_m, N_p, 2)
    map_features: np.ndarray  # (N_m, C)


def decoder_layer(state: QueryState, radar: RadarFeatures, grids, cams, params: DecoderParams,
                  index: int = 0, geometry: FrameGeometry | None = None) -> QueryState:
    """Radar aggregation, deformable perspective sampling, self-attention, FFN, refinement.

    ``geometry`` may be shared across layers as long as it matches the state's
    anchors and polylines; otherwise it is rebuilt.
    """
    cfg = params.config
    p = f"layer{index}"
    if geometry is None or not geometry.matches(state):
        geometry = FrameGeometry.build(state.anchors, state.polylines, radar, grids, cams, cfg)
    n_agents = len(state.anchors)
    agent_f = aggregate_agent_queries(state.anchors, state.agent_features, radar, params, f"{p}.radar_agent",
                                      selection=geometry.agent_keys)
    map_f = aggregate_map_queries(state.polylines, state.map_features, radar, params, f"{p}.radar_map",
                                  selection=geometry.map_keys)
    agent_f, map_f = deformable_aggregation(state.anchors, state.polylines, agent_f, map_f, grids, cams, params, p,
                                            geometry)
    joint = layer_norm(np.concatenate([agent_f, map_f], axis=0))
    joint = layer_norm(self_attention(joint, params, f"{p}.self", cfg.num_heads))
    joint = layer_norm(feed_forward(joint, params, p))
    agent_f, map_f = joint[:n_agents], joint[n_agents:]
    anchors = normalize_yaw(state.anchors + agent_f @ params[f"{p}.refine.agent"])
    polylines = state.polylines + (map_f @ params[f"{p}.refine.map"]).reshape(state.polylines.shape)
    return QueryState(anchors, agent_f, polylines, map_f)


def run_decoder(state: QueryState, radar: RadarFeatures, grids, cams, params: DecoderParams) -> QueryState:
    """All decoder layers, reusing frame geometry while anchors and polylines stay put."""
    geometry = None
    for i in range(params.config.num_decoder_layers):
        if geometry is None or not geometry.matches(state):
            geometry = FrameGeometry.build(state.anchors, state.polylines, radar, grids, cams, params.config)
        state = decoder_layer(state, radar, grids, cams, params, i, geometry)
    return state


def embed_anchors(anchors, params: DecoderParams) -> np.ndarray:
    """Positional and shape embedding used to initialise agent features."""
    a = np.asarray(anchors, dtype=float)
    proj = a[:, [X, Y]] @ params["embed.freq"]
    shape = np.stack([a[:, Z] / 5.0, np.log(np.maximum(a[:, W], 1e-3)), np.log(np.maximum(a[:, H], 1e-3)),
                      np.log(np.maximum(a[:, L], 1e-3)), a[:, SIN], a[:, COS]], axis=1)
    return layer_norm(np.concatenate([np.sin(proj), np.cos(proj)], axis=1) + shape @ params["embed.shape"])


def embed_polylines(polylines, params: DecoderParams) -> np.ndarray:
    polys = np.asarray(polylines, dtype=float)
    proj = polys @ params["embed.freq"]  # (N_m, N_p, C/2)
    pos = np.concatenate([np.sin(proj), np.cos(proj)], axis=2).mean(axis=1)
    return layer_norm(pos)


def temporal_attention(anchors, features, memory_anchors, memory_features, params: DecoderParams):
    """Agents attend to propagated instances from the memory queue."""
    if len(memory_features) == 0 or len(features) == 0:
        return features
    diff = anchors[:, None, [X, Y, Z]] - memory_anchors[None, :, [X, Y, Z]]
    sel = select_keys(np.sqrt(np.sum(diff * diff, axis=-1)), params.config)
    mem = RadarFeatures(memory_features, memory_anchors[:, [X, Y, Z]])
    return _attend_selected(np.asarray(features, dtype=float), sel, mem, params, "temporal", params.config)[0]
