import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radarfuse.core import (IDENTITY, AgentInstance, Frame, MapPolyline, Pose2D, RadarPoint, compose_pose,
                            relative_pose, transform_points, validate_frame, validate_scene, wrap_angle)

coord = st.floats(-100, 100, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
poses = st.builds(Pose2D, coord, coord, angle)


def close(a: Pose2D, b: Pose2D, tol=1e-9):
    return (abs(a.x - b.x) < tol and abs(a.y - b.y) < tol
            and abs(float(wrap_angle(a.yaw - b.yaw))) < tol)


def _anchor(w=1.8, l=4.5, h=1.5):
    return np.array([5.0, 1.0, 0.0, w, h, l, 0.0, 1.0, 0.0, 0.0, 0.0])


def test_compose_identity_and_inverse():
    p = Pose2D(3.0, -2.0, 0.7)
    assert close(compose_pose(IDENTITY, p), p)
    assert close(compose_pose(p, p.inverse()), IDENTITY)
    assert close(compose_pose(p.inverse(), p), IDENTITY)


def test_compose_hand_case():
    r = compose_pose(Pose2D(1, 0, math.pi / 2), Pose2D(1, 0, 0))
    assert r.x == pytest.approx(1.0, abs=1e-12)
    assert r.y == pytest.approx(1.0, abs=1e-12)
    assert r.yaw == pytest.approx(math.pi / 2, abs=1e-12)


def test_transform_points_examples():
    pts = np.array([[1.0, 2.0], [-3.0, 4.0]])
    np.testing.assert_array_equal(transform_points(pts, IDENTITY), pts)
    np.testing.assert_allclose(transform_points([1.0, 0.0], Pose2D(0, 0, math.pi / 2)), [0.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(transform_points([10.0, 0.0], Pose2D(-2, 0, 0)), [8.0, 0.0], atol=1e-12)


def test_transform_points_keeps_z():
    out = transform_points([[1.0, 2.0, 7.5]], Pose2D(1, 1, 1.0))
    assert out[0, 2] == 7.5


@settings(max_examples=200, deadline=None)
@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    assert close(compose_pose(compose_pose(a, b), c), compose_pose(a, compose_pose(b, c)), 1e-9)


@settings(max_examples=200, deadline=None)
@given(poses)
def test_inverse_two_sided(p):
    assert close(p @ p.inverse(), IDENTITY)
    assert close(p.inverse() @ p, IDENTITY)


@settings(max_examples=100, deadline=None)
@given(poses, st.integers(0, 2**32 - 1))
def test_transform_is_isometry(p, seed):
    pts = np.random.default_rng(seed).uniform(-50, 50, (8, 2))
    out = transform_points(pts, p)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(poses, poses)
def test_relative_pose_maps_source_into_target(target, source):
    pts = np.array([[1.0, 2.0], [-4.0, 0.5]])
    world = transform_points(pts, source)
    via_rel = transform_points(pts, relative_pose(target, source))
    np.testing.assert_allclose(transform_points(world, target.inverse()), via_rel, atol=1e-9)


def _frame(**kw):
    base = dict(timestamp=0.0, ego_pose=IDENTITY, ego_velocity=np.zeros(2))
    base.update(kw)
    return Frame(**base)


def test_validate_frame_clean():
    f = _frame(gt_agents=(AgentInstance(_anchor(), instance_id=1),),
               gt_map=(MapPolyline(np.array([[0.0, 0.0], [1.0, 0.0]])),),
               radar_points=(RadarPoint(1, 2, 0, 1.0, 0.5, 0.1),))
    assert validate_frame(f) == []


def test_validate_frame_zero_width():
    report = validate_frame(_frame(gt_agents=(AgentInstance(_anchor(w=0.0), instance_id=4),)))
    assert len(report) == 1 and "dimension w" in report[0]


def test_validate_frame_single_waypoint():
    report = validate_frame(_frame(gt_map=(MapPolyline(np.array([[0.0, 0.0]])),)))
    assert len(report) == 1 and "waypoint count" in report[0]


def test_validate_frame_other_rules():
    bad_yaw = _anchor()
    bad_yaw[6] = 0.5
    f = _frame(gt_agents=(AgentInstance(bad_yaw, class_scores=np.array([1.5, 0, 0])),),
               gt_map=(MapPolyline(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])),),
               radar_points=(RadarPoint(0, 0, 0, 0, 0, -0.1),))
    text = " | ".join(validate_frame(f))
    for needle in ("sin^2", "class_scores", "coincide", "sweep_offset"):
        assert needle in text
    # pure function of content
    assert validate_frame(f) == validate_frame(f)


def test_validate_scene_timestamps():
    frames = [_frame(timestamp=0.0, index=0), _frame(timestamp=0.0, index=1)]
    assert validate_scene(frames) == ["timestamps must be strictly increasing"]
