"""Shared domain types, configuration and planar pose arithmetic.

Frame convention: x forward, y left, z up, yaw counter-clockwise from +x.
Trajectories are sampled every ``DT`` seconds starting one step after the
current time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

DT = 0.5
PLAN_STEPS = 12
MOTION_STEPS = 24
PERCEPTION_RANGE = 50.0

# 11-parameter anchor layout
X, Y, Z, W, H, L, SIN, COS, VX, VY, VZ = range(11)
ANCHOR_DIM = 11

AGENT_CLASSES = ("car", "pedestrian", "cyclist")
MAP_CLASSES = ("divider", "boundary", "ped_crossing")


class DrivingCommand(enum.IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    GO_STRAIGHT = 2


def wrap_angle(theta):
    """Wrap to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), float(wrap_angle(-self.yaw)))

    def __matmul__(self, other: "Pose2D") -> "Pose2D":
        return compose_pose(self, other)


IDENTITY = Pose2D()


def compose_pose(a: Pose2D, b: Pose2D) -> Pose2D:
    """Rigid transform ``a o b``: apply ``b`` first, then ``a``."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2D(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        float(wrap_angle(a.yaw + b.yaw)),
    )


def relative_pose(target: Pose2D, source: Pose2D) -> Pose2D:
    """Pose mapping ``source``-frame coordinates into the ``target`` frame.

    Both poses are expressed in a common (world) frame.
    """
    return compose_pose(target.inverse(), source)


def transform_points(points, pose: Pose2D) -> np.ndarray:
    """Rotate by ``pose.yaw`` then translate; a third column (z) passes through."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = pts.copy()
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + pose.x
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + pose.y
    return out[0] if single else out


def rotate_vectors(vectors, yaw: float) -> np.ndarray:
    v = np.asarray(vectors, dtype=float)
    c, s = math.cos(yaw), math.sin(yaw)
    out = v.copy()
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    return out


@dataclass(frozen=True)
class RadarPoint:
    x: float
    y: float
    z: float
    rcs: float
    doppler: float  # m/s, positive = receding from the sensor
    sweep_offset: float = 0.0  # seconds before the current frame

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


RADAR_FIELDS = ("x", "y", "z", "rcs", "doppler", "sweep_offset")


def radar_array(points: Sequence[RadarPoint]) -> np.ndarray:
    """Stack radar points into an ``(N, 6)`` array ordered as ``RADAR_FIELDS``."""
    if len(points) == 0:
        return np.zeros((0, 6))
    return np.array([[p.x, p.y, p.z, p.rcs, p.doppler, p.sweep_offset] for p in points], dtype=float)


def radar_points(array: np.ndarray) -> tuple[RadarPoint, ...]:
    return tuple(RadarPoint(*map(float, row)) for row in np.asarray(array, dtype=float).reshape(-1, 6))


@dataclass(frozen=True, eq=False)
class AgentInstance:
    anchor: np.ndarray  # (11,)
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))
    class_scores: np.ndarray = field(default_factory=lambda: np.zeros(len(AGENT_CLASSES)))
    instance_id: int = -1

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_scores))

    @property
    def score(self) -> float:
        return float(np.max(self.class_scores)) if len(self.class_scores) else 0.0

    @property
    def yaw(self) -> float:
        return math.atan2(self.anchor[SIN], self.anchor[COS])


@dataclass(frozen=True, eq=False)
class MapPolyline:
    waypoints: np.ndarray  # (N_p, 2)
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))
    class_scores: np.ndarray = field(default_factory=lambda: np.zeros(len(MAP_CLASSES)))

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_scores))


@dataclass(frozen=True, eq=False)
class Trajectory:
    points: np.ndarray  # (T, 2), ego frame, step DT
    score: float = 0.0

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Multi-modal futures: ``modes`` is ``(M, T, 2)``, ``scores`` is ``(M,)``."""

    modes: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.modes)

    def best(self) -> Trajectory:
        i = int(np.argmax(self.scores))
        return Trajectory(self.modes[i], float(self.scores[i]))


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 1.0
    r_max: float = PERCEPTION_RANGE
    embed_dim: int = 64
    num_agent_anchors: int = 900
    num_map_anchors: int = 100
    num_decoder_layers: int = 6
    topk_radar: int = 32
    num_heads: int = 4
    # radar keys farther than this from a query are ignored
    query_radius: float = 10.0
    frustum_radius_px: float = 12.0

    def validate(self) -> list[str]:
        problems = []
        if not self.r_max > 0:
            problems.append("r_max must be > 0")
        if not self.alpha >= 0:
            problems.append("alpha must be >= 0")
        if self.num_decoder_layers < 1:
            problems.append("num_decoder_layers must be >= 1")
        if self.embed_dim < 1 or self.embed_dim % self.num_heads:
            problems.append("embed_dim must be a positive multiple of num_heads")
        if self.topk_radar < 1:
            problems.append("topk_radar must be >= 1")
        return problems


@dataclass(frozen=True, eq=False)
class Frame:
    timestamp: float
    ego_pose: Pose2D  # world frame
    ego_velocity: np.ndarray  # (2,) m/s in the ego frame
    radar_points: tuple[RadarPoint, ...] = ()
    cameras: tuple = ()  # CameraModel per camera
    camera_grids: tuple = ()  # (H, W, C) array per camera
    gt_agents: tuple[AgentInstance, ...] = ()
    gt_map: tuple[MapPolyline, ...] = ()
    # instance_id -> (MOTION_STEPS, 3) future x, y, yaw in the current ego frame
    gt_futures: Mapping[int, np.ndarray] = field(default_factory=dict)
    gt_ego_future: np.ndarray = field(default_factory=lambda: np.zeros((PLAN_STEPS, 3)))
    command: DrivingCommand = DrivingCommand.GO_STRAIGHT
    scene_id: str = ""
    index: int = 0

    def radar_array(self) -> np.ndarray:
        return radar_array(self.radar_points)


def validate_frame(frame: Frame) -> list[str]:
    """Return human-readable invariant violations; empty when the frame is valid."""
    problems = []
    for p in frame.radar_points:
        if p.sweep_offset < 0:
            problems.append(f"radar point sweep_offset must be >= 0 (got {p.sweep_offset})")
            break
    for a in frame.gt_agents:
        anc = np.asarray(a.anchor)
        tag = f"agent {a.instance_id}"
        if anc.shape != (ANCHOR_DIM,) or not np.all(np.isfinite(anc)):
            problems.append(f"{tag}: anchor must hold 11 finite values")
            continue
        for name, idx in (("w", W), ("h", H), ("l", L)):
            if not anc[idx] > 0:
                problems.append(f"{tag}: dimension {name} must be > 0 (got {anc[idx]})")
        if abs(anc[SIN] ** 2 + anc[COS] ** 2 - 1.0) > 1e-6:
            problems.append(f"{tag}: sin^2 + cos^2 must equal 1")
        cs = np.asarray(a.class_scores)
        if np.any(cs < 0) or np.any(cs > 1):
            problems.append(f"{tag}: class_scores must lie in [0, 1]")
    for i, poly in enumerate(frame.gt_map):
        wp = np.asarray(poly.waypoints)
        n = len(wp)
        if not 2 <= n <= 20:
            problems.append(f"polyline {i}: waypoint count must be in [2, 20] (got {n})")
            continue
        gaps = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        if np.any(gaps <= 1e-9):
            problems.append(f"polyline {i}: consecutive waypoints coincide")
    return problems


def validate_scene(frames: Sequence[Frame]) -> list[str]:
    problems = []
    for f in frames:
        problems.extend(f"frame {f.index}: {p}" for p in validate_frame(f))
    ts = [f.timestamp for f in frames]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        problems.append("timestamps must be strictly increasing")
    return problems
