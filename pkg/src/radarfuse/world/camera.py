"""Synthetic camera feature grids standing in for an image backbone.

Each camera yields an ``(H, W, C)`` grid of seeded Gaussian noise. Cells whose
centres fall inside the projected bounding rectangle of an agent's 3D box
additionally carry a class embedding plus depth and relative-heading codes.
Nothing in a grid encodes velocity.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..core import COS, H, L, SIN, W, X, Y, Z
from ..geometry import CameraModel, project_points

GRID_SHAPE = (8, 16)
FEATURE_DIM = 64
NOISE_SIGMA = 0.5
CAMERA_YAWS_DEG = (0.0, 60.0, -60.0, 120.0, -120.0, 180.0)
# fixed across scenes so that embeddings mean the same thing everywhere
_CODEBOOK_SEED = 20_240_607


def default_cameras(width: int = 256, height: int = 128) -> tuple[CameraModel, ...]:
    return tuple(CameraModel.mounted(math.radians(y), width=width, height=height) for y in CAMERA_YAWS_DEG)


def _codebook(dim: int):
    rng = np.random.default_rng(_CODEBOOK_SEED)
    classes = rng.normal(size=(3, dim))
    depth_proj = rng.normal(size=(8, dim)) / math.sqrt(8)
    heading_proj = rng.normal(size=(2, dim))
    return classes, depth_proj, heading_proj


def box_corners_3d(anchor) -> np.ndarray:
    """The 8 corners of an anchor's box in the ego frame."""
    a = np.asarray(anchor, dtype=float)
    c, s = a[COS], a[SIN]
    sx = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * 0.5 * a[L]
    sy = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * 0.5 * a[W]
    sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * 0.5 * a[H]
    return np.stack([a[X] + c * sx - s * sy, a[Y] + s * sx + c * sy, a[Z] + sz], axis=1)


def projected_rect(anchor, cam: CameraModel):
    """Image-clipped ``(u0, v0, u1, v1)`` of the projected box, or ``None``.

    A box is only drawn when all of its corners lie in front of the camera.
    """
    uv, depth, _ = project_points(box_corners_3d(anchor), cam)
    if np.any(depth <= 0.1):
        return None
    u0, v0 = uv.min(axis=0)
    u1, v1 = uv.max(axis=0)
    u0, u1 = max(u0, 0.0), min(u1, float(cam.width))
    v0, v1 = max(v0, 0.0), min(v1, float(cam.height))
    if u0 >= u1 or v0 >= v1:
        return None
    return u0, v0, u1, v1


def cell_center_pixels(cam: CameraModel, grid_shape=GRID_SHAPE) -> np.ndarray:
    gh, gw = grid_shape
    cols = (np.arange(gw) + 0.5) * cam.width / gw
    rows = (np.arange(gh) + 0.5) * cam.height / gh
    uu, vv = np.meshgrid(cols, rows)
    return np.stack([uu, vv], axis=-1)  # (gh, gw, 2)


def _depth_code(depth: float) -> np.ndarray:
    f = np.arange(1, 5)
    x = depth / 50.0 * f * math.pi
    return np.concatenate([np.sin(x), np.cos(x)])


def render_camera_features(frame, cams: Sequence[CameraModel], seed, dim: int = FEATURE_DIM,
                           grid_shape=GRID_SHAPE, noise_sigma: float = NOISE_SIGMA) -> list[np.ndarray]:
    """Per-camera feature grids for the ground-truth agents of ``frame``."""
    rng = np.random.default_rng(seed)
    classes, depth_proj, heading_proj = _codebook(dim)
    grids = []
    for cam in cams:
        noise = rng.normal(0.0, noise_sigma, size=(*grid_shape, dim))
        grid = noise.copy()
        centers = cell_center_pixels(cam, grid_shape)
        painted = []
        for agent in frame.gt_agents:
            rect = projected_rect(agent.anchor, cam)
            if rect is None:
                continue
            u0, v0, u1, v1 = rect
            mask = (centers[..., 0] >= u0) & (centers[..., 0] <= u1) & (centers[..., 1] >= v0) & (centers[..., 1] <= v1)
            if not mask.any():
                continue
            depth = float(cam.to_camera(np.asarray(agent.anchor)[[X, Y, Z]])[2])
            cam_yaw = math.atan2(cam.rotation[2, 1], cam.rotation[2, 0])
            rel = agent.yaw - cam_yaw
            emb = classes[agent.label] + _depth_code(depth) @ depth_proj + np.array([math.sin(rel), math.cos(rel)]) @ heading_proj
            painted.append((depth, mask, emb))
        # far to near so the nearest agent owns shared cells
        for depth, mask, emb in sorted(painted, key=lambda p: -p[0]):
            grid[mask] = noise[mask] + emb
        grids.append(grid)
    return grids
