"""Radar return simulation: Doppler, RCS, occlusion, noise and multi-sweep accumulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core import (
    COS,
    L,
    SIN,
    VX,
    VY,
    W,
    X,
    Y,
    AgentInstance,
    Pose2D,
    RadarPoint,
    radar_array,
    radar_points,
    relative_pose,
    transform_points,
)
from .scene import CLASS_RCS, STATIC_RCS, RadarSensorConfig, WeatherNoise, World, agent_anchor


def doppler_radial_velocity(point_pos, point_vel, ego_vel, sensor_pos) -> float:
    """Relative radial velocity seen by the sensor, positive when the point recedes."""
    p, vp, ve, s = (np.asarray(a, dtype=float) for a in (point_pos, point_vel, ego_vel, sensor_pos))
    d = p - s
    n = float(np.linalg.norm(d))
    if n < 1e-12:
        raise ValueError("point coincides with the sensor; Doppler direction undefined")
    return float((vp - ve) @ (d / n))


def compensate_doppler(doppler, point_pos, ego_vel, sensor_pos) -> float:
    """Remove the ego contribution, leaving the point's own ground-frame radial speed."""
    p, ve, s = (np.asarray(a, dtype=float) for a in (point_pos, ego_vel, sensor_pos))
    d = p - s
    n = float(np.linalg.norm(d))
    if n < 1e-12:
        raise ValueError("point coincides with the sensor; Doppler direction undefined")
    return float(doppler + ve @ (d / n))


@dataclass(frozen=True, eq=False)
class SweepScene:
    """Ground truth at one sweep time, in the ego frame at that time.

    Anchor velocities are ground velocities expressed in ego-frame axes.
    """

    agents: Sequence[AgentInstance]
    ego_velocity: np.ndarray
    static_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


def sweep_scene(world: World, t: float, margin: float = 10.0) -> SweepScene:
    ego_pose = world.ego_pose(t)
    agents = []
    for tr in world.agents:
        scores = np.zeros(3)
        scores[tr.label] = 1.0
        agents.append(AgentInstance(agent_anchor(tr, t, ego_pose), class_scores=scores, instance_id=tr.instance_id))
    stat = transform_points(world.static_points, ego_pose.inverse()) if len(world.static_points) else np.zeros((0, 2))
    reach = max(r.max_range for r in world.config.radars) + margin
    stat = stat[np.hypot(stat[:, 0], stat[:, 1]) <= reach]
    ego_vel = world.ego.velocity(t)
    c, s = math.cos(-ego_pose.yaw), math.sin(-ego_pose.yaw)
    return SweepScene(tuple(agents), np.array([c * ego_vel[0] - s * ego_vel[1], s * ego_vel[0] + c * ego_vel[1]]), stat)


def _box_frames(anchors: np.ndarray):
    yaw = np.arctan2(anchors[:, SIN], anchors[:, COS])
    c, s = np.cos(yaw), np.sin(yaw)
    axes = np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], axis=1)  # (K, 2, 2)
    half = np.stack([0.5 * anchors[:, L], 0.5 * anchors[:, W]], axis=1)
    return anchors[:, [X, Y]], axes, half


def rays_blocked(origin, targets, anchors, owner=None) -> np.ndarray:
    """True where the segment origin -> target passes through the interior of a box.

    ``owner[i]`` is the box index that target ``i`` lies on (excluded), or -1.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 11)
    if len(targets) == 0 or len(anchors) == 0:
        return np.zeros(len(targets), dtype=bool)
    centers, axes, half = _box_frames(anchors)
    o = np.asarray(origin, dtype=float)[:2]
    a = np.einsum("kij,kj->ki", axes, o[None] - centers)  # (K, 2) origin in box frame
    b = np.einsum("kij,nkj->nki", axes, targets[:, None, :] - centers[None])  # (N, K, 2)
    d = b - a[None]
    lo = np.zeros(d.shape[:2])
    hi = np.ones(d.shape[:2])
    blocked = np.ones(d.shape[:2], dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(2):
            h = half[None, :, k]
            dk, ak = d[..., k], np.broadcast_to(a[None, :, k], d.shape[:2])
            par = np.abs(dk) < 1e-15
            blocked &= ~(par & (np.abs(ak) >= h))
            t0 = (-h - ak) / np.where(par, 1.0, dk)
            t1 = (h - ak) / np.where(par, 1.0, dk)
            tmin, tmax = np.minimum(t0, t1), np.maximum(t0, t1)
            lo = np.where(par, lo, np.maximum(lo, tmin))
            hi = np.where(par, hi, np.minimum(hi, tmax))
    blocked &= lo < hi
    if owner is not None:
        own = np.asarray(owner)
        rows = np.flatnonzero(own >= 0)
        blocked[rows, own[rows]] = False
    return blocked.any(axis=1)


def sample_perimeter(anchor, n: int, rng: np.random.Generator):
    """``n`` uniform samples on the box outline; returns points and outward face normals."""
    a = np.asarray(anchor, dtype=float)
    hl, hw = 0.5 * a[L], 0.5 * a[W]
    perim = 4 * (hl + hw)
    s = rng.uniform(0.0, perim, size=n)
    local = np.empty((n, 2))
    normal = np.empty((n, 2))
    edges = [(2 * hl, lambda u: (u - hl, -hw), (0.0, -1.0)), (2 * hw, lambda u: (hl, u - hw), (1.0, 0.0)),
             (2 * hl, lambda u: (hl - u, hw), (0.0, 1.0)), (2 * hw, lambda u: (-hl, hw - u), (-1.0, 0.0))]
    start = 0.0
    for k, (length, param, nrm) in enumerate(edges):
        m = (s >= start) & (s < start + length) if k < 3 else (s >= start)
        u = s[m] - start
        px, py = param(u)
        local[m, 0], local[m, 1] = px, py
        normal[m] = nrm
        start += length
    yaw = math.atan2(a[SIN], a[COS])
    c, si = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -si], [si, c]])
    return local @ rot.T + a[[X, Y]], normal @ rot.T


def _sweep_array(scene: SweepScene, sensor: RadarSensorConfig, rng: np.random.Generator,
                 weather: WeatherNoise = WeatherNoise()) -> np.ndarray:
    mount = sensor.mount
    origin = np.array([mount.x, mount.y])
    anchors = np.array([np.asarray(a.anchor, dtype=float) for a in scene.agents]).reshape(-1, 11)
    pts, vels, rcs, owner = [], [], [], []
    for i, agent in enumerate(scene.agents):
        p, nrm = sample_perimeter(anchors[i], sensor.points_per_agent, rng)
        facing = np.einsum("ij,ij->i", nrm, origin - p) > 0
        p = p[facing]
        pts.append(p)
        vels.append(np.repeat(anchors[i, [VX, VY]][None], len(p), axis=0))
        rcs.append(np.full(len(p), CLASS_RCS[agent.label]))
        owner.append(np.full(len(p), i))
    stat = np.asarray(scene.static_points, dtype=float).reshape(-1, 2)
    if len(stat):
        keep = rng.random(len(stat)) < sensor.static_density
        stat = stat[keep]
        pts.append(stat)
        vels.append(np.zeros_like(stat))
        rcs.append(np.full(len(stat), STATIC_RCS))
        owner.append(np.full(len(stat), -1))
    if not pts:
        return np.zeros((0, 6))
    p = np.concatenate(pts)
    v = np.concatenate(vels)
    r = np.concatenate(rcs)
    own = np.concatenate(owner)
    d = p - origin
    rng_dist = np.hypot(d[:, 0], d[:, 1])
    az = np.arctan2(d[:, 1], d[:, 0]) - mount.yaw
    az = (az + np.pi) % (2 * np.pi) - np.pi
    ok = (rng_dist <= sensor.max_range) & (np.abs(az) <= 0.5 * sensor.fov) & (rng_dist > 1e-6)
    p, v, r, own, d, rng_dist = p[ok], v[ok], r[ok], own[ok], d[ok], rng_dist[ok]
    vis = ~rays_blocked(origin, p, anchors, own)
    p, v, r, d, rng_dist = p[vis], v[vis], r[vis], d[vis], rng_dist[vis]
    u = d / rng_dist[:, None]
    ego_v = np.asarray(scene.ego_velocity, dtype=float)[:2]
    doppler = np.einsum("ij,ij->i", v - ego_v, u)
    n = len(p)
    # draws happen unconditionally so the stream layout is independent of noise levels
    pos_noise = rng.normal(size=(n, 2)) * weather.position_sigma
    dop_noise = rng.normal(size=n) * weather.doppler_sigma
    rcs_jitter = rng.normal(size=n)
    keep = rng.random(n) >= weather.dropout
    out = np.zeros((n, 6))
    out[:, :2] = p + pos_noise
    out[:, 3] = r + rcs_jitter
    out[:, 4] = doppler + dop_noise
    return out[keep]


def simulate_sweep(scene, sensor: RadarSensorConfig, seed, weather: WeatherNoise = WeatherNoise()) -> list[RadarPoint]:
    """One radar sweep in the ego frame of ``scene``.

    ``scene`` is a ``SweepScene`` or a ``Frame`` (its ground-truth agents and ego
    velocity are used; frames carry no static reflectors).
    """
    if not isinstance(scene, SweepScene):
        scene = SweepScene(tuple(scene.gt_agents), np.asarray(scene.ego_velocity, dtype=float))
    rng = np.random.default_rng(seed)
    return list(radar_points(_sweep_array(scene, sensor, rng, weather)))


def accumulate_sweep_arrays(sweeps: Sequence[np.ndarray], ego_poses: Sequence[Pose2D],
                            timestamps: Optional[Sequence[float]] = None, sweep_interval: float = 0.075) -> np.ndarray:
    """Array form of ``accumulate_sweeps``; rows follow ``RADAR_FIELDS``."""
    if len(sweeps) != len(ego_poses):
        raise ValueError(f"got {len(sweeps)} sweeps but {len(ego_poses)} ego poses")
    if timestamps is not None and len(timestamps) != len(sweeps):
        raise ValueError("timestamps must match sweeps in length")
    if not len(sweeps):
        return np.zeros((0, 6))
    n = len(sweeps)
    times = np.asarray(timestamps, dtype=float) if timestamps is not None else (np.arange(n) - (n - 1)) * sweep_interval
    current = ego_poses[-1]
    out = []
    for sweep, pose, t in zip(sweeps, ego_poses, times):
        arr = np.array(sweep, dtype=float).reshape(-1, 6)
        if len(arr):
            arr[:, :2] = transform_points(arr[:, :2], relative_pose(current, pose))
            arr[:, 5] += times[-1] - t
        out.append(arr)
    return np.concatenate(out)


def accumulate_sweeps(sweeps: Sequence, ego_poses: Sequence[Pose2D], timestamps: Optional[Sequence[float]] = None,
                      sweep_interval: float = 0.075) -> list[RadarPoint]:
    """Express every sweep in the ego frame of the last pose.

    ``sweep_offset`` grows by the time elapsed since each sweep; without
    timestamps, sweeps are assumed ``sweep_interval`` apart.
    """
    arrays = [s if isinstance(s, np.ndarray) else radar_array(list(s)) for s in sweeps]
    return list(radar_points(accumulate_sweep_arrays(arrays, ego_poses, timestamps, sweep_interval)))


def simulate_frame_radar(world: World, t: float, index: int = 0) -> np.ndarray:
    """Accumulated multi-sensor, multi-sweep returns for the frame at time ``t``."""
    cfg = world.config
    if not cfg.radars:
        return np.zeros((0, 6))
    num_sweeps = cfg.radars[0].num_sweeps
    interval = cfg.radars[0].sweep_interval
    sweeps, poses, times = [], [], []
    for k in reversed(range(num_sweeps)):
        tk = t - k * interval
        scene = sweep_scene(world, tk)
        parts = [
            _sweep_array(scene, sensor, np.random.default_rng([cfg.seed, index, k, j]), cfg.weather)
            for j, sensor in enumerate(cfg.radars)
        ]
        sweeps.append(np.concatenate(parts) if parts else np.zeros((0, 6)))
        poses.append(world.ego_pose(tk))
        times.append(tk)
    return accumulate_sweep_arrays(sweeps, poses, times)
