"""Procedural BEV driving scenes: map templates, lanes and piecewise CTRV motion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..core import (
    AGENT_CLASSES,
    ANCHOR_DIM,
    DT,
    MAP_CLASSES,
    MOTION_STEPS,
    PERCEPTION_RANGE,
    PLAN_STEPS,
    AgentInstance,
    DrivingCommand,
    Frame,
    MapPolyline,
    Pose2D,
    radar_points,
    relative_pose,
    rotate_vectors,
    transform_points,
    wrap_angle,
)
from ..geometry import resample_polyline

MAP_TEMPLATES = ("straight", "T-junction", "curve")
LANE_HALF = 1.75
ROAD_HALF = 7.0
EGO_SIZE = (1.73, 1.56, 4.08)  # w, h, l
CLASS_SIZES = {0: (1.9, 1.6, 4.5), 1: (0.7, 1.8, 0.7), 2: (0.7, 1.6, 1.8)}
CLASS_RCS = {0: 10.0, 1: -2.0, 2: 2.0}
STATIC_RCS = 5.0


@dataclass(frozen=True)
class WeatherNoise:
    position_sigma: float = 0.0
    dropout: float = 0.0
    doppler_sigma: float = 0.0


@dataclass(frozen=True)
class RadarSensorConfig:
    mount: Pose2D = Pose2D()
    max_range: float = PERCEPTION_RANGE
    fov: float = math.radians(120.0)
    points_per_agent: int = 24
    num_sweeps: int = 4
    # fraction of boundary samples returning per sweep
    static_density: float = 0.3
    sweep_interval: float = 0.075

    def validate(self) -> list[str]:
        problems = []
        if not self.max_range > 0:
            problems.append("radar max_range must be > 0")
        if self.num_sweeps < 1:
            problems.append("radar num_sweeps must be >= 1")
        if not 0 < self.fov <= 2 * math.pi:
            problems.append("radar fov must be in (0, 2*pi]")
        if self.points_per_agent < 0:
            problems.append("radar points_per_agent must be >= 0")
        return problems


def default_radars(**overrides) -> tuple[RadarSensorConfig, ...]:
    """Five-sensor ring similar to common surround radar layouts."""
    mounts = [Pose2D(3.4, 0.0, 0.0), Pose2D(2.6, 0.8, math.radians(70)), Pose2D(2.6, -0.8, math.radians(-70)),
              Pose2D(-0.6, 0.8, math.radians(140)), Pose2D(-0.6, -0.8, math.radians(-140))]
    return tuple(RadarSensorConfig(mount=m, **overrides) for m in mounts)


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    num_agents: int = 8
    scene_duration: float = 5.0
    map_template: str = "straight"
    weather: WeatherNoise = WeatherNoise()
    agent_speed_range: tuple[float, float] = (2.0, 15.0)
    ego_speed_range: tuple[float, float] = (3.0, 14.0)
    frame_rate: float = 2.0
    radars: tuple[RadarSensorConfig, ...] = field(default_factory=default_radars)

    def validate(self) -> list[str]:
        problems = []
        if self.num_agents < 0:
            problems.append("num_agents must be >= 0")
        if not self.scene_duration > 0:
            problems.append("scene_duration must be > 0")
        if self.map_template not in MAP_TEMPLATES:
            problems.append(f"map_template must be one of {MAP_TEMPLATES}, got {self.map_template!r}")
        if not 0 <= self.weather.dropout < 1:
            problems.append("dropout must be in [0, 1)")
        if self.weather.position_sigma < 0 or self.weather.doppler_sigma < 0:
            problems.append("noise sigmas must be >= 0")
        if not self.frame_rate > 0:
            problems.append("frame_rate must be > 0")
        for name in ("agent_speed_range", "ego_speed_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                problems.append(f"{name} must satisfy 0 <= low <= high")
        for r in self.radars:
            problems.extend(r.validate())
        return problems


class ScenarioError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid scenario config: " + "; ".join(self.problems))


def ctrv(pose: Pose2D, speed: float, yaw_rate: float, t: float) -> Pose2D:
    """Closed-form constant-turn-rate-and-velocity propagation."""
    if abs(yaw_rate) < 1e-12:
        return Pose2D(pose.x + speed * t * math.cos(pose.yaw), pose.y + speed * t * math.sin(pose.yaw), pose.yaw)
    yaw1 = pose.yaw + yaw_rate * t
    r = speed / yaw_rate
    return Pose2D(pose.x + r * (math.sin(yaw1) - math.sin(pose.yaw)),
                  pose.y + r * (math.cos(pose.yaw) - math.cos(yaw1)), float(wrap_angle(yaw1)))


@dataclass(frozen=True)
class MotionSegment:
    duration: float  # the final segment extends indefinitely
    speed: float
    yaw_rate: float


@dataclass(frozen=True)
class Track:
    """Piecewise CTRV motion of one rigid agent; world frame, ``t = 0`` at scene start."""

    instance_id: int
    label: int  # index into AGENT_CLASSES, -1 for ego
    size: tuple[float, float, float]  # w, h, l
    start: Pose2D
    segments: tuple[MotionSegment, ...]

    def _segment_at(self, t: float):
        pose, t0 = self.start, 0.0
        for i, seg in enumerate(self.segments):
            last = i == len(self.segments) - 1
            if t < 0 and i == 0:
                return pose, seg, t
            if last or t <= t0 + seg.duration:
                return pose, seg, t - t0
            pose = ctrv(pose, seg.speed, seg.yaw_rate, seg.duration)
            t0 += seg.duration
        raise AssertionError("unreachable")

    def pose(self, t: float) -> Pose2D:
        pose, seg, dt = self._segment_at(t)
        return ctrv(pose, seg.speed, seg.yaw_rate, dt)

    def velocity(self, t: float) -> np.ndarray:
        """World-frame ground velocity (vx, vy)."""
        pose, seg, dt = self._segment_at(t)
        yaw = pose.yaw + seg.yaw_rate * dt
        return np.array([seg.speed * math.cos(yaw), seg.speed * math.sin(yaw)])

    def yaw_rate(self, t: float) -> float:
        return self._segment_at(t)[1].yaw_rate


@dataclass(frozen=True, eq=False)
class World:
    config: ScenarioConfig
    ego: Track
    agents: tuple[Track, ...]
    map_lines: tuple[tuple[int, np.ndarray], ...]  # (map class, dense world waypoints)
    static_points: np.ndarray  # (S, 2) world-frame radar reflectors on boundaries
    command: DrivingCommand

    def ego_pose(self, t: float) -> Pose2D:
        return self.ego.pose(t)

    def frame_times(self) -> np.ndarray:
        n = max(1, int(round(self.config.scene_duration * self.config.frame_rate)))
        return np.arange(n) / self.config.frame_rate


@dataclass(frozen=True)
class Lane:
    ref: Pose2D
    curvature: float

    def pose(self, s: float) -> Pose2D:
        return ctrv(self.ref, 1.0, self.curvature, s)


def _straight_lanes():
    fwd = lambda y: Lane(Pose2D(0.0, y, 0.0), 0.0)
    back = lambda y: Lane(Pose2D(0.0, y, math.pi), 0.0)
    return fwd, back


def _arc(center, radius, phi0, phi1, sign, step=1.0):
    n = max(2, int(abs(phi1 - phi0) * radius / step) + 1)
    phi = np.linspace(phi0, phi1, n)
    return np.stack([center[0] + radius * np.sin(phi), center[1] - sign * radius * np.cos(phi)], axis=1)


def _line(p0, p1, step=1.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.linalg.norm(p1 - p0) / step) + 1)
    return np.linspace(p0, p1, n)


def _build_template(cfg: ScenarioConfig, rng: np.random.Generator, ego_speed: float):
    """Return (ego track, lane table, map lines, command)."""
    template = cfg.map_template
    x_min, x_max = -150.0, 450.0
    lines: list[tuple[int, np.ndarray]] = []
    lanes: dict[str, Lane] = {}
    div, bnd, ped = (MAP_CLASSES.index(c) for c in ("divider", "boundary", "ped_crossing"))
    if template in ("straight", "T-junction"):
        fwd, back = _straight_lanes()
        lanes = {"ego": fwd(-LANE_HALF), "fwd_outer": fwd(-3 * LANE_HALF), "back_inner": back(LANE_HALF),
                 "back_outer": back(3 * LANE_HALF), "bike_fwd": fwd(-6.3), "bike_back": back(6.3),
                 "walk_right": fwd(-8.6), "walk_left": back(8.6)}
        for y in (-2 * LANE_HALF, 0.0, 2 * LANE_HALF):
            lines.append((div, _line((x_min, y), (x_max, y), 2.0)))
        crossing_x = float(rng.uniform(30.0, 90.0))
        lines.append((ped, _line((crossing_x, -ROAD_HALF), (crossing_x, ROAD_HALF), 1.0)))
    if template == "straight":
        lines.append((bnd, _line((x_min, -ROAD_HALF), (x_max, -ROAD_HALF))))
        lines.append((bnd, _line((x_min, ROAD_HALF), (x_max, ROAD_HALF))))
        ego = Track(-1, -1, EGO_SIZE, lanes["ego"].pose(0.0), (MotionSegment(math.inf, ego_speed, 0.0),))
        return ego, lanes, lines, DrivingCommand.GO_STRAIGHT
    if template == "T-junction":
        side = 1.0 if rng.random() < 0.5 else -1.0  # +1: side road to the left
        xj = float(rng.uniform(25.0, 45.0))
        turn_r = 10.0 if side > 0 else 8.0
        near_y = side * ROAD_HALF
        far_y = -near_y
        lines.append((bnd, _line((x_min, far_y), (x_max, far_y))))
        lines.append((bnd, _line((x_min, near_y), (xj - ROAD_HALF, near_y))))
        lines.append((bnd, _line((xj + ROAD_HALF, near_y), (x_max, near_y))))
        end = side * 300.0
        for x in (xj - ROAD_HALF, xj + ROAD_HALF):
            lines.append((bnd, _line((x, near_y), (x, end))))
        for x in (xj - 2 * LANE_HALF, xj, xj + 2 * LANE_HALF):
            lines.append((div, _line((x, near_y), (x, end), 2.0)))
        # right-hand traffic: the exit lane lies on the driver's right
        exit_x = xj + LANE_HALF if side > 0 else xj - LANE_HALF
        start_turn = exit_x - turn_r
        heading = side * math.pi / 2
        lanes["side_away"] = Lane(Pose2D(exit_x, 0.0, heading), 0.0)
        t_turn = float(rng.uniform(0.5, 4.0))
        x0 = start_turn - ego_speed * t_turn
        arc_t = (math.pi / 2) * turn_r / ego_speed
        ego = Track(-1, -1, EGO_SIZE, Pose2D(x0, -LANE_HALF, 0.0),
                    (MotionSegment(t_turn, ego_speed, 0.0), MotionSegment(arc_t, ego_speed, side * ego_speed / turn_r),
                     MotionSegment(math.inf, ego_speed, 0.0)))
        cmd = DrivingCommand.TURN_LEFT if side > 0 else DrivingCommand.TURN_RIGHT
        return ego, lanes, lines, cmd
    # curve; lateral offsets are measured to the left of the ego direction
    sign = 1.0 if rng.random() < 0.5 else -1.0  # +1 bends left
    radius = float(rng.uniform(50.0, 120.0))
    center = (0.0, sign * radius)
    phi_lo = -150.0 / radius
    phi_hi = min(2 * math.pi - 0.3, 450.0 / radius) + phi_lo
    for off, cls in ((-ROAD_HALF, bnd), (ROAD_HALF, bnd), (-2 * LANE_HALF, div), (0.0, div), (2 * LANE_HALF, div)):
        lines.append((cls, _arc(center, radius - sign * off, phi_lo, phi_hi, sign, 1.0 if cls == bnd else 2.0)))

    def lane(off, forward):
        r = radius - sign * off
        return Lane(Pose2D(0.0, off, 0.0 if forward else math.pi), sign / r if forward else -sign / r)

    lanes = {"ego": lane(-LANE_HALF, True), "fwd_outer": lane(-3 * LANE_HALF, True),
             "back_inner": lane(LANE_HALF, False), "back_outer": lane(3 * LANE_HALF, False),
             "bike_fwd": lane(-6.3, True), "bike_back": lane(6.3, False),
             "walk_right": lane(-8.6, True), "walk_left": lane(8.6, False)}
    e = lanes["ego"]
    ego = Track(-1, -1, EGO_SIZE, e.ref, (MotionSegment(math.inf, ego_speed, ego_speed * e.curvature),))
    cmd = DrivingCommand.TURN_LEFT if sign > 0 else DrivingCommand.TURN_RIGHT
    return ego, lanes, lines, cmd


def _spawn_agents(cfg: ScenarioConfig, rng: np.random.Generator, lanes: dict, ego_speed: float):
    tracks = []
    if cfg.num_agents == 0:
        return tracks
    car_lanes = ["fwd_outer", "back_inner", "back_outer", "ego"] + (["side_away"] if "side_away" in lanes else [])
    lo, hi = cfg.agent_speed_range
    lane_speed = {}
    for name in car_lanes:
        if name == "ego":
            lane_speed[name] = ego_speed + float(rng.uniform(0.5, 3.0))
        else:
            lane_speed[name] = 0.0 if rng.random() < 0.15 else float(rng.uniform(lo, hi))
    occupied: dict[str, list[float]] = {}
    next_id = 0
    for _ in range(cfg.num_agents):
        u = rng.random()
        if u < 0.6:
            label, name = 0, car_lanes[int(rng.integers(len(car_lanes)))]
            speed = lane_speed[name]
        elif u < 0.8:
            label = 1
            name = "walk_right" if rng.random() < 0.5 else "walk_left"
            speed = float(rng.uniform(0.8, 1.8))
        else:
            label = 2
            name = "bike_fwd" if rng.random() < 0.5 else "bike_back"
            speed = float(rng.uniform(3.0, 6.0))
        lane = lanes[name]
        forward = abs(wrap_angle(lane.ref.yaw)) < 1.0
        for _attempt in range(20):
            if name == "ego":
                s = float(rng.uniform(15.0, 60.0))
            elif name.startswith("side"):
                s = float(rng.uniform(12.0, 45.0))
            else:
                # ego starts near the origin; oncoming lanes run with decreasing x
                s = float(rng.uniform(-35.0, 70.0)) if forward else float(rng.uniform(-70.0, 40.0))
            if all(abs(s - o) > 10.0 for o in occupied.get(name, [])):
                break
        else:
            continue
        occupied.setdefault(name, []).append(s)
        start = lane.pose(s)
        if name.startswith("walk") and rng.random() < 0.5:
            start = Pose2D(start.x, start.y, float(wrap_angle(start.yaw + math.pi)))
            yaw_rate = -speed * lane.curvature
        else:
            yaw_rate = speed * lane.curvature
        w, h, l = CLASS_SIZES[label]
        jitter = 1.0 + 0.08 * rng.uniform(-1, 1, size=3)
        size = (w * jitter[0], h * jitter[1], l * jitter[2])
        tracks.append(Track(next_id, label, size, start, (MotionSegment(math.inf, speed, yaw_rate),)))
        next_id += 1
    return tracks


def build_world(cfg: ScenarioConfig) -> World:
    problems = cfg.validate()
    if problems:
        raise ScenarioError(problems)
    rng = np.random.default_rng([cfg.seed, 1])
    lo, hi = cfg.ego_speed_range
    if cfg.map_template == "T-junction":
        hi = min(hi, 8.0)
        lo = min(lo, hi)
    ego_speed = float(rng.uniform(lo, hi))
    ego, lanes, lines, cmd = _build_template(cfg, rng, ego_speed)
    agents = _spawn_agents(cfg, rng, lanes, ego_speed)
    bnd = MAP_CLASSES.index("boundary")
    statics = [resample_polyline(wp, max(2, int(_length(wp) / 0.5))) for c, wp in lines if c == bnd]
    static_pts = np.concatenate(statics) if statics else np.zeros((0, 2))
    return World(cfg, ego, tuple(agents), tuple(lines), static_pts, cmd)


def _length(wp) -> float:
    return float(np.sum(np.linalg.norm(np.diff(wp, axis=0), axis=1)))


def agent_anchor(track: Track, t: float, ego_pose: Pose2D) -> np.ndarray:
    """11-parameter anchor of ``track`` at time ``t`` in the ego frame."""
    rel = relative_pose(ego_pose, track.pose(t))
    v = rotate_vectors(track.velocity(t), -ego_pose.yaw)
    w, h, l = track.size
    a = np.zeros(ANCHOR_DIM)
    a[:] = [rel.x, rel.y, 0.5 * h, w, h, l, math.sin(rel.yaw), math.cos(rel.yaw), v[0], v[1], 0.0]
    return a


def future_in_frame(track: Track, t: float, ego_pose: Pose2D, steps: int) -> np.ndarray:
    """``(steps, 3)`` future x, y, yaw at ``t + k * DT`` expressed in the given ego frame."""
    out = np.zeros((steps, 3))
    for k in range(steps):
        rel = relative_pose(ego_pose, track.pose(t + (k + 1) * DT))
        out[k] = (rel.x, rel.y, rel.yaw)
    return out


def map_in_frame(world: World, ego_pose: Pose2D, max_points: int = 20, spacing: float = 2.5) -> list[MapPolyline]:
    """Clip world map lines to the perception range and split into <= 20 waypoint pieces."""
    inv = ego_pose.inverse()
    out = []
    for cls, wp in world.map_lines:
        local = transform_points(wp, inv)
        inside = np.hypot(local[:, 0], local[:, 1]) <= PERCEPTION_RANGE
        if not inside.any():
            continue
        idx = np.flatnonzero(inside)
        breaks = np.flatnonzero(np.diff(idx) > 1)
        for run in np.split(idx, breaks + 1):
            piece = local[run]
            length = _length(piece) if len(piece) > 1 else 0.0
            if length < 1.0:
                continue
            max_len = spacing * (max_points - 1)
            n_chunks = int(math.ceil(length / max_len))
            s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(piece, axis=0), axis=1))])
            for c in range(n_chunks):
                s0, s1 = c * length / n_chunks, (c + 1) * length / n_chunks
                n = int(min(max_points, max(2, math.ceil((s1 - s0) / spacing) + 1)))
                ss = np.linspace(s0, s1, n)
                pts = np.stack([np.interp(ss, s, piece[:, 0]), np.interp(ss, s, piece[:, 1])], axis=1)
                scores = np.zeros(len(MAP_CLASSES))
                scores[cls] = 1.0
                out.append(MapPolyline(pts, class_scores=scores))
    return out


def command_from_future(future: np.ndarray, threshold: float = 2.0) -> DrivingCommand:
    """Driving command from the lateral offset at the end of the planning horizon."""
    y = float(future[-1, 1])
    if y > threshold:
        return DrivingCommand.TURN_LEFT
    if y < -threshold:
        return DrivingCommand.TURN_RIGHT
    return DrivingCommand.GO_STRAIGHT


def make_frame(world: World, index: int, t: float, radar, cameras=(), grids=()) -> Frame:
    ego_pose = world.ego_pose(t)
    agents, futures = [], {}
    for tr in world.agents:
        anchor = agent_anchor(tr, t, ego_pose)
        if math.hypot(anchor[0], anchor[1]) > PERCEPTION_RANGE:
            continue
        scores = np.zeros(len(AGENT_CLASSES))
        scores[tr.label] = 1.0
        agents.append(AgentInstance(anchor, class_scores=scores, instance_id=tr.instance_id))
        futures[tr.instance_id] = future_in_frame(tr, t, ego_pose, MOTION_STEPS)
    ego_future = future_in_frame(world.ego, t, ego_pose, PLAN_STEPS)
    ego_vel = rotate_vectors(world.ego.velocity(t), -ego_pose.yaw)
    return Frame(
        timestamp=float(t), ego_pose=ego_pose, ego_velocity=ego_vel,
        radar_points=radar_points(radar) if isinstance(radar, np.ndarray) else tuple(radar),
        cameras=tuple(cameras), camera_grids=tuple(grids), gt_agents=tuple(agents),
        gt_map=tuple(map_in_frame(world, ego_pose)), gt_futures=futures, gt_ego_future=ego_future,
        command=command_from_future(ego_future), scene_id=f"scene_{world.config.seed:06d}", index=index,
    )


def generate_scene(cfg: ScenarioConfig, cameras=None) -> list[Frame]:
    """Frames with accumulated radar, camera feature grids and ground truth."""
    from .camera import default_cameras, render_camera_features
    from .radar import simulate_frame_radar

    world = build_world(cfg)
    cams = default_cameras() if cameras is None else tuple(cameras)
    frames = []
    for i, t in enumerate(world.frame_times()):
        radar = simulate_frame_radar(world, float(t), index=i)
        frame = make_frame(world, i, float(t), radar, cams)
        grids = render_camera_features(frame, cams, seed=(cfg.seed, i))
        frames.append(replace(frame, camera_grids=tuple(grids)))
    return frames


def world_for(cfg: ScenarioConfig, seed: Optional[int] = None) -> World:
    return build_world(cfg if seed is None else replace(cfg, seed=seed))
