"""Trainable output heads on top of the frozen decoder.

Every head is linear in its weights applied to a fixed lifting
``phi = [1, features, tanh(features @ R)]`` where ``R`` is a seeded random
projection. Trajectory modes are cumulative sums of per-step displacements
``dt * (v0 + a * t) + template``, so each mode starts at the anchor and is
continuous by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AGENT_CLASSES,
    ANCHOR_DIM,
    COS,
    DT,
    MAP_CLASSES,
    MOTION_STEPS,
    PLAN_STEPS,
    SIN,
    VX,
    VY,
    X,
    Y,
    DrivingCommand,
)

NUM_MODES = 6
LIFT_DIM = 64
MAP_POINTS = 20
NUM_COMMANDS = len(DrivingCommand)
PRIOR_LOGIT = -math.log((1 - 0.01) / 0.01)
AGENT_TEMPLATE_SPEEDS = (0.0, 1.5, 4.0, 7.0, 10.0, 13.0)
EGO_TEMPLATE_SPEEDS = (2.0, 4.0, 6.0, 8.0, 10.0, 12.0)
# signed curvature per command for the ego templates
COMMAND_CURVATURE = {DrivingCommand.TURN_LEFT: 0.06, DrivingCommand.TURN_RIGHT: -0.06, DrivingCommand.GO_STRAIGHT: 0.0}

DET_OUT = len(AGENT_CLASSES) + ANCHOR_DIM
MOTION_OUT = NUM_MODES * 4 + NUM_MODES
PLAN_OUT = NUM_COMMANDS * NUM_MODES * 5
MAP_OUT = len(MAP_CLASSES) + MAP_POINTS * 2


def agent_phi_dim(c: int) -> int:
    return 1 + 2 * c + 4 + LIFT_DIM


def ego_phi_dim(c: int) -> int:
    return 1 + c + LIFT_DIM


def step_coefficients(steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Position after ``k + 1`` steps is ``c1[k] v0 + c2[k] a + cumsum(template)[k]``."""
    k = np.arange(steps, dtype=float)
    return (k + 1) * DT, DT * DT * k * (k + 1) / 2.0


def _arc_steps(speed: float, curvature: float, steps: int) -> np.ndarray:
    s = speed * DT * np.arange(steps + 1)
    if abs(curvature) < 1e-12:
        pts = np.stack([s, np.zeros_like(s)], axis=1)
    else:
        pts = np.stack([np.sin(curvature * s) / curvature, (1 - np.cos(curvature * s)) / curvature], axis=1)
    return np.diff(pts, axis=0)


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Trainable head weights plus the seeded (frozen) random liftings."""

    seed: int
    embed_dim: int
    arrays: dict = field(default_factory=dict)
    lifts: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    @property
    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def with_arrays(self, arrays: dict) -> "HeadParams":
        return HeadParams(self.seed, self.embed_dim, {k: np.array(v, dtype=float) for k, v in arrays.items()}, self.lifts)

    @staticmethod
    def make_lifts(seed: int, c: int) -> dict:
        rng = np.random.default_rng([seed, 7002])
        return {
            "agent": rng.normal(0.0, 1.5 / math.sqrt(2 * c + 4), size=(2 * c + 4, LIFT_DIM)),
            "ego": rng.normal(0.0, 1.5 / math.sqrt(c), size=(c, LIFT_DIM)),
            "map": rng.normal(0.0, 1.5 / math.sqrt(c), size=(c, LIFT_DIM)),
        }

    @classmethod
    def init(cls, seed: int, embed_dim: int) -> "HeadParams":
        rng = np.random.default_rng([seed, 7003])
        c = embed_dim
        da, de = agent_phi_dim(c), ego_phi_dim(c)
        arrays = {
            "det": rng.normal(0.0, 1e-3, size=(da, DET_OUT)),
            "motion": rng.normal(0.0, 1e-3, size=(da, MOTION_OUT)),
            "plan": rng.normal(0.0, 1e-3, size=(de, PLAN_OUT)),
            "map": rng.normal(0.0, 1e-3, size=(de, MAP_OUT)),
        }
        arrays["det"][0, : len(AGENT_CLASSES)] = PRIOR_LOGIT
        arrays["map"][0, : len(MAP_CLASSES)] = PRIOR_LOGIT
        arrays["motion.template"] = np.stack([_arc_steps(v, 0.0, MOTION_STEPS) for v in AGENT_TEMPLATE_SPEEDS])
        arrays["plan.template"] = np.stack([
            np.stack([_arc_steps(v, COMMAND_CURVATURE[cmd], PLAN_STEPS) for v in EGO_TEMPLATE_SPEEDS])
            for cmd in DrivingCommand
        ])
        return cls(seed, c, arrays, cls.make_lifts(seed, c))


def agent_phi(features, ego_feature, anchors, lifts: dict) -> np.ndarray:
    """Per-agent lifting; uses the anchor's heading and velocity but never its position."""
    f = np.asarray(features, dtype=float)
    n = len(f)
    a = np.asarray(anchors, dtype=float).reshape(n, ANCHOR_DIM)
    e = np.broadcast_to(np.asarray(ego_feature, dtype=float), (n, f.shape[1]))
    dyn = np.stack([a[:, VX] / 10.0, a[:, VY] / 10.0, a[:, SIN], a[:, COS]], axis=1)
    base = np.concatenate([f, e, dyn], axis=1)
    return np.concatenate([np.ones((n, 1)), base, np.tanh(base @ lifts["agent"])], axis=1)


def single_phi(features, lift: np.ndarray) -> np.ndarray:
    f = np.atleast_2d(np.asarray(features, dtype=float))
    return np.concatenate([np.ones((len(f), 1)), f, np.tanh(f @ lift)], axis=1)


def detection_outputs(phi, heads: HeadParams):
    """Class logits ``(N, 3)`` and anchor deltas ``(N, 11)``."""
    out = phi @ heads["det"]
    k = len(AGENT_CLASSES)
    return out[:, :k], out[:, k:]


def decode_boxes(anchors, deltas) -> np.ndarray:
    boxes = np.asarray(anchors, dtype=float) + deltas
    norm = np.hypot(boxes[:, SIN], boxes[:, COS])
    ok = norm > 1e-9
    boxes[ok, SIN] /= norm[ok]
    boxes[ok, COS] /= norm[ok]
    boxes[~ok, SIN], boxes[~ok, COS] = 0.0, 1.0
    boxes[:, 3:6] = np.maximum(boxes[:, 3:6], 0.05)
    return boxes


def heading_rotations(anchors) -> np.ndarray:
    """``(N, 2, 2)`` rotations from each anchor's heading frame into the ego frame."""
    a = np.asarray(anchors, dtype=float).reshape(-1, ANCHOR_DIM)
    norm = np.hypot(a[:, SIN], a[:, COS])
    ok = norm > 1e-9
    safe = np.where(ok, norm, 1.0)
    s = np.where(ok, a[:, SIN] / safe, 0.0)
    c = np.where(ok, a[:, COS] / safe, 1.0)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], axis=1)


def motion_outputs(phi, anchors, heads: HeadParams, steps: int = MOTION_STEPS):
    """Agent modes ``(N, 6, T, 2)`` in the ego frame and mode logits ``(N, 6)``."""
    raw = phi @ heads["motion"]
    n = len(raw)
    v0 = raw[:, : 2 * NUM_MODES].reshape(n, NUM_MODES, 2)
    acc = raw[:, 2 * NUM_MODES: 4 * NUM_MODES].reshape(n, NUM_MODES, 2)
    logits = raw[:, 4 * NUM_MODES:]
    c1, c2 = step_coefficients(steps)
    tmpl = np.cumsum(heads["motion.template"][:, :steps], axis=1)
    local = c1[None, None, :, None] * v0[:, :, None, :] + c2[None, None, :, None] * acc[:, :, None, :] + tmpl[None]
    rot = heading_rotations(anchors)
    a = np.asarray(anchors, dtype=float).reshape(-1, ANCHOR_DIM)
    modes = np.einsum("nij,nmtj->nmti", rot, local) + a[:, None, None, [X, Y]]
    return modes, logits


def plan_outputs(phi_ego, heads: HeadParams, steps: int = PLAN_STEPS):
    """Ego modes ``(3, 6, T, 2)`` from the origin and logits ``(3, 6)``, indexed by command."""
    raw = np.asarray(phi_ego, dtype=float).reshape(-1) @ heads["plan"]
    n = NUM_COMMANDS * NUM_MODES
    v0 = raw[: 2 * n].reshape(NUM_COMMANDS, NUM_MODES, 2)
    acc = raw[2 * n: 4 * n].reshape(NUM_COMMANDS, NUM_MODES, 2)
    logits = raw[4 * n:].reshape(NUM_COMMANDS, NUM_MODES)
    c1, c2 = step_coefficients(steps)
    tmpl = np.cumsum(heads["plan.template"][:, :, :steps], axis=2)
    modes = c1[None, None, :, None] * v0[:, :, None, :] + c2[None, None, :, None] * acc[:, :, None, :] + tmpl
    return modes, logits


def map_outputs(phi_map, polylines, heads: HeadParams):
    """Class logits ``(N_m, 3)`` and refined waypoints ``(N_m, 20, 2)``."""
    out = phi_map @ heads["map"]
    k = len(MAP_CLASSES)
    polys = np.asarray(polylines, dtype=float)
    return out[:, :k], polys + out[:, k:].reshape(polys.shape)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def softmax(x, axis=-1):
    z = np.asarray(x, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
