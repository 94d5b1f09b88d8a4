"""Polyline projection, pinhole cameras, bilinear sampling and oriented boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import COS, L, SIN, W, X, Y, MapPolyline

NEAR_PLANE = 0.1
_EPS_SEG = 1e-9


class DegenerateSegmentError(ValueError):
    pass


class InvalidPolylineError(ValueError):
    pass


def segment_projection_param(p, a, b) -> float:
    """Clamped position of the projection of ``p`` onto segment ``a -> b``."""
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    ab = b - a
    denom = float(ab @ ab)
    if math.sqrt(denom) <= _EPS_SEG:
        raise DegenerateSegmentError("zero-length segment")
    return float(np.clip((p - a) @ ab / denom, 0.0, 1.0))


def _waypoints(polyline) -> np.ndarray:
    wp = polyline.waypoints if isinstance(polyline, MapPolyline) else polyline
    return np.asarray(wp, dtype=float)[:, :2]


class PolylineDistance(NamedTuple):
    distance: float
    segment: int
    t: float


def point_polyline_distance(p, polyline) -> PolylineDistance:
    """Minimum distance from ``p`` to the segments of ``polyline``.

    Ties go to the lowest segment index.
    """
    wp = _waypoints(polyline)
    if len(wp) < 2:
        raise InvalidPolylineError(f"polyline needs >= 2 waypoints, got {len(wp)}")
    p = np.asarray(p, dtype=float)[:2]
    a, b = wp[:-1], wp[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    if np.any(np.sqrt(denom) <= _EPS_SEG):
        raise DegenerateSegmentError("polyline contains a zero-length segment")
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / denom, 0.0, 1.0)
    d = np.linalg.norm(p - (a + t[:, None] * ab), axis=1)
    i = int(np.argmin(d))
    return PolylineDistance(float(d[i]), i, float(t[i]))


def points_to_polylines_distance(points, polylines) -> np.ndarray:
    """Vectorised minimum distances, ``(P, M)`` for ``P`` polylines and ``M`` points.

    ``polylines`` is ``(P, N, 2)``; zero-length segments are tolerated and act as points.
    """
    pts = np.asarray(points, dtype=float)[:, :2]
    polys = np.asarray(polylines, dtype=float)
    a = polys[:, :-1, None, :]  # (P, S, 1, 2)
    ab = (polys[:, 1:] - polys[:, :-1])[:, :, None, :]
    denom = np.maximum(np.einsum("psmd,psmd->psm", ab, ab), 1e-18)
    ap = pts[None, None] - a  # (P, S, M, 2)
    t = np.clip(np.einsum("psmd,psmd->psm", ap, np.broadcast_to(ab, ap.shape)) / denom, 0.0, 1.0)
    diff = ap - t[..., None] * ab
    return np.sqrt(np.einsum("psmd,psmd->psm", diff, diff).min(axis=1))


def polyline_chamfer(a, b) -> float:
    """Symmetric mean of directed waypoint-to-polyline distances."""
    a, b = _waypoints(a), _waypoints(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs non-empty polylines")

    def directed(src, dst):
        if len(dst) == 1:
            return float(np.mean(np.linalg.norm(src - dst[0], axis=1)))
        return float(np.mean(points_to_polylines_distance(src, dst[None])[0]))

    return 0.5 * (directed(a, b) + directed(b, a))


def resample_polyline(waypoints, n: int) -> np.ndarray:
    """Resample to ``n`` points evenly spaced by arc length."""
    wp = np.asarray(waypoints, dtype=float)
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(target, s, wp[:, 0]), np.interp(target, s, wp[:, 1])], axis=1)


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) ego -> camera
    translation: np.ndarray  # (3,) camera = R @ ego + t
    width: int
    height: int

    @classmethod
    def mounted(cls, yaw: float, position=(0.0, 0.0, 1.5), fov: float = math.radians(70.0),
                width: int = 256, height: int = 128) -> "CameraModel":
        """Level camera on the ego vehicle looking along ``yaw``."""
        fx = 0.5 * width / math.tan(0.5 * fov)
        c, s = math.cos(yaw), math.sin(yaw)
        # camera axes: x right, y down, z forward
        rot = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        pos = np.asarray(position, dtype=float)
        return cls(fx, fx, width / 2.0, height / 2.0, rot, -rot @ pos, width, height)

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation


class Projection(NamedTuple):
    u: float
    v: float
    depth: float


def project_camera_frame(point_cam, cam: CameraModel) -> Optional[Projection]:
    """Pinhole projection of a point already in camera coordinates."""
    x, y, z = (float(c) for c in point_cam)
    if z <= NEAR_PLANE:
        return None
    u = cam.cx + cam.fx * x / z
    v = cam.cy + cam.fy * y / z
    if not (0.0 <= u <= cam.width and 0.0 <= v <= cam.height):
        return None
    return Projection(u, v, z)


def project_to_camera(point, cam: CameraModel) -> Optional[Projection]:
    """Project an ego-frame point; ``None`` when outside the frustum."""
    return project_camera_frame(cam.to_camera(point), cam)


def project_points(points, cam: CameraModel):
    """Vectorised projection returning ``(uv (N, 2), depth (N,), inside (N,))``."""
    pc = cam.to_camera(np.asarray(points, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    safe = np.where(z > NEAR_PLANE, z, 1.0)
    uv = np.stack([cam.cx + cam.fx * pc[:, 0] / safe, cam.cy + cam.fy * pc[:, 1] / safe], axis=1)
    inside = (z > NEAR_PLANE) & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height)
    return uv, z, inside


def unproject(u: float, v: float, depth: float, cam: CameraModel) -> np.ndarray:
    """Camera-frame point for pixel ``(u, v)`` at ``depth``."""
    return np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])


def bilinear_sample(grid, uv) -> np.ndarray:
    """Bilinear interpolation of an ``(H, W, C)`` grid at node coordinates ``uv = (col, row)``.

    Accepts a single ``(2,)`` coordinate or a batch ``(..., 2)``; coordinates are
    clamped to the grid (border replication).
    """
    g = np.asarray(grid)
    if g.size == 0 or g.ndim != 3:
        raise ValueError("bilinear_sample needs a non-empty (H, W, C) grid")
    h, w = g.shape[:2]
    uv = np.asarray(uv, dtype=float)
    u = np.clip(uv[..., 0], 0.0, w - 1)
    v = np.clip(uv[..., 1], 0.0, h - 1)
    u0 = np.minimum(np.floor(u).astype(int), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(int), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    return ((1 - fu) * (1 - fv) * g[v0, u0] + fu * (1 - fv) * g[v0, u1]
            + (1 - fu) * fv * g[v1, u0] + fu * fv * g[v1, u1])


@dataclass(frozen=True)
class OrientedBox2D:
    x: float
    y: float
    half_length: float  # along yaw
    half_width: float
    yaw: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def axes(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, s], [-s, c]])

    def corners(self) -> np.ndarray:
        ax = self.axes()
        signs = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
        return self.center + (signs[:, :1] * self.half_length) * ax[0] + (signs[:, 1:] * self.half_width) * ax[1]

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        d = np.atleast_2d(np.asarray(points, dtype=float)) - self.center
        local = d @ self.axes().T
        return (np.abs(local[:, 0]) <= self.half_length + tol) & (np.abs(local[:, 1]) <= self.half_width + tol)


def box_from_anchor(anchor) -> OrientedBox2D:
    a = np.asarray(anchor, dtype=float)
    return OrientedBox2D(a[X], a[Y], 0.5 * a[L], 0.5 * a[W], math.atan2(a[SIN], a[COS]))


def box_separation(a: OrientedBox2D, b: OrientedBox2D) -> float:
    """Largest projected gap over the four candidate axes.

    Positive means separated by a separating axis, negative is the smallest
    penetration along any axis, and values near zero indicate tangency.
    """
    ca, cb = a.corners(), b.corners()
    gap = -np.inf
    for axis in np.vstack([a.axes(), b.axes()]):
        pa, pb = ca @ axis, cb @ axis
        gap = max(gap, pb.min() - pa.max(), pa.min() - pb.max())
    return float(gap)


def boxes_overlap(a: OrientedBox2D, b: OrientedBox2D) -> bool:
    """Separating-axis test; touching boxes count as overlapping."""
    return box_separation(a, b) <= 0.0


def segment_intersects_box(p0, p1, box: OrientedBox2D, margin: float = 0.0) -> bool:
    """True if the segment ``p0 -> p1`` passes through the box interior (slab test)."""
    ax = box.axes()
    a = (np.asarray(p0, dtype=float)[:2] - box.center) @ ax.T
    b = (np.asarray(p1, dtype=float)[:2] - box.center) @ ax.T
    d = b - a
    lo, hi = 0.0, 1.0
    for k, half in enumerate((box.half_length - margin, box.half_width - margin)):
        if abs(d[k]) < 1e-15:
            if abs(a[k]) >= half:
                return False
            continue
        t0, t1 = (-half - a[k]) / d[k], (half - a[k]) / d[k]
        if t0 > t1:
            t0, t1 = t1, t0
        lo, hi = max(lo, t0), min(hi, t1)
        if lo >= hi:
            return False
    return True
