import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exhaustive_two_partition
from radarfuse.core import ANCHOR_DIM, COS, MOTION_STEPS, PLAN_STEPS, SIN, DrivingCommand, TrajectorySet
from radarfuse.heads import NUM_MODES, HeadParams
from radarfuse.metrics import tpc
from radarfuse.planner import (MEMORY_FRAMES, PlannerState, init_params, kmeans, kmeans_anchors, oracle_output,
                               rescore_trajectories, run_frame, select_plan, trajectory_head)


@pytest.fixture(scope="module")
def params(small_cfg, scene):
    return init_params(small_cfg, 3, scene)


class TestKMeans:
    def test_k_distinct_points(self):
        pts = np.array([[0.0, 0.0], [5.0, 1.0], [-3.0, 8.0], [2.0, -2.0]])
        r = kmeans(pts, 4, seed=0)
        assert r.inertia == 0.0
        assert sorted(map(tuple, r.centroids)) == sorted(map(tuple, pts))

    def test_duplicates_never_leave_a_cluster_empty(self):
        # many coincident rows make several clusters empty in the same iteration
        pts = np.r_[np.zeros((20, 2)), np.ones((3, 2)) * [4.0, 0.0], [[9.0, 9.0]]]
        for seed in range(30):
            r = kmeans(pts, 5, seed=seed)
            assert np.all(np.isfinite(r.centroids))
            assert set(r.labels) == set(range(5))

    def test_single_cluster_is_mean(self):
        pts = np.random.default_rng(0).normal(size=(30, 3))
        np.testing.assert_allclose(kmeans(pts, 1, seed=5).centroids[0], pts.mean(axis=0), atol=1e-12)

    def test_two_blobs_match_exhaustive_partition(self):
        rng = np.random.default_rng(1)
        pts = np.vstack([rng.normal(0, 1, (6, 2)), rng.normal(20, 1, (6, 2))])
        best, mask = exhaustive_two_partition(pts)
        r = kmeans(pts, 2, seed=2)
        assert r.inertia == pytest.approx(best, abs=1e-9)
        same = r.labels == r.labels[0]
        assert np.array_equal(same, mask == mask[0])

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((2, 2)), 3, seed=0)
        with pytest.raises(ValueError):
            kmeans_anchors(np.zeros((1, ANCHOR_DIM)), 2, seed=0)

    def test_deterministic(self):
        pts = np.random.default_rng(3).normal(size=(200, 4))
        a, b = kmeans(pts, 7, seed=9), kmeans(pts, 7, seed=9)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_anchor_headings_normalised(self):
        boxes = np.random.default_rng(4).normal(size=(50, ANCHOR_DIM))
        a = kmeans_anchors(boxes, 5, seed=0)
        np.testing.assert_allclose(np.hypot(a[:, SIN], a[:, COS]), 1.0, atol=1e-12)


def zero_heads(embed_dim):
    h = HeadParams.init(0, embed_dim)
    return h.with_arrays({k: np.zeros_like(v) for k, v in h.arrays.items()})


class TestTrajectoryHead:
    def test_zero_displacements_stay_at_anchor(self):
        h = zero_heads(16)
        anchor = np.zeros(ANCHOR_DIM)
        anchor[:2] = [4.0, -2.0]
        anchor[COS] = 1.0
        ts = trajectory_head(np.ones(16), anchor, h, MOTION_STEPS)
        np.testing.assert_array_equal(ts.modes, np.broadcast_to([4.0, -2.0], ts.modes.shape))
        plans = trajectory_head(np.ones(16), anchor, h, PLAN_STEPS)
        for cmd in DrivingCommand:
            np.testing.assert_array_equal(plans[cmd].modes, np.broadcast_to([4.0, -2.0], plans[cmd].modes.shape))

    def test_counts(self):
        h = HeadParams.init(1, 16)
        anchor = np.zeros(ANCHOR_DIM)
        anchor[COS] = 1.0
        ts = trajectory_head(np.ones(16), anchor, h, MOTION_STEPS)
        assert ts.modes.shape == (NUM_MODES, MOTION_STEPS, 2) and ts.scores.shape == (NUM_MODES,)
        plans = trajectory_head(np.ones(16), None, h, PLAN_STEPS)
        assert set(plans) == set(DrivingCommand)
        assert all(p.modes.shape == (NUM_MODES, PLAN_STEPS, 2) for p in plans.values())
        with pytest.raises(ValueError):
            trajectory_head(np.ones(16), anchor, h, 7)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(5)
        h = HeadParams.init(2, 16)
        h = h.with_arrays({k: v + rng.normal(0, 0.1, v.shape) for k, v in h.arrays.items()})
        feat = rng.normal(size=16)
        anchor = rng.normal(size=ANCHOR_DIM)
        base = trajectory_head(feat, anchor, h, MOTION_STEPS)
        for _ in range(10):
            shift = rng.uniform(-50, 50, 2)
            moved = anchor.copy()
            moved[:2] += shift
            out = trajectory_head(feat, moved, h, MOTION_STEPS)
            np.testing.assert_allclose(out.modes, base.modes + shift, atol=1e-9)
            np.testing.assert_array_equal(out.scores, base.scores)


def straight(y, steps=PLAN_STEPS, speed=2.0):
    return np.c_[speed * 0.5 * np.arange(1, steps + 1), np.full(steps, y)]


class TestRescore:
    def test_no_agents(self):
        ego = TrajectorySet(np.stack([straight(0), straight(5)]), np.array([0.3, 0.7]))
        out = rescore_trajectories(ego, [])
        np.testing.assert_array_equal(out.scores, ego.scores)

    def test_coincident_penalised(self):
        ego = TrajectorySet(np.stack([straight(0), straight(10)]), np.array([0.5, 0.5]))
        agent = TrajectorySet(straight(0)[None], np.ones(1))
        out = rescore_trajectories(ego, [agent])
        assert ego.scores[0] - out.scores[0] >= 1.0 * 3.0
        assert out.scores[1] == ego.scores[1]
        assert out.scores[0] < out.scores[1]
        np.testing.assert_array_equal(out.modes, ego.modes)

    def test_two_agent_hand_sum(self):
        ego_pts = straight(0.0, 4, speed=2.0)  # x = 1, 2, 3, 4
        a1 = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 5.0], [4.0, 9.0]])
        a2 = np.array([[9.0, 0.0], [2.0, -2.5], [3.0, -0.5], [20.0, 0.0]])
        low = a1 + [0.0, 40.0]  # the lower-scored mode must be ignored
        agents = [TrajectorySet(np.stack([low, a1]), np.array([0.1, 0.9])), TrajectorySet(a2[None], np.ones(1))]
        # nearest agent per step: 1.0, 2.0, 0.5, 9.0 -> penalties 2.0, 1.0, 2.5, 0
        want = 0.4 - math.fsum([2.0, 1.0, 2.5, 0.0])
        out = rescore_trajectories(TrajectorySet(ego_pts[None], np.array([0.4])), agents)
        assert out.scores[0] == pytest.approx(want, abs=1e-12)


class TestSelectPlan:
    def test_single_mode(self):
        p = straight(0)
        assert np.array_equal(select_plan(TrajectorySet(p[None], np.array([0.1])), DrivingCommand.GO_STRAIGHT).points, p)

    def test_second_selected(self):
        ts = TrajectorySet(np.stack([straight(0), straight(1)]), np.array([0.2, 0.9]))
        assert select_plan(ts, DrivingCommand.TURN_LEFT).points[0, 1] == 1.0

    def test_ties_lowest_index(self):
        ts = TrajectorySet(np.stack([straight(0), straight(1)]), np.array([0.5, 0.5]))
        assert select_plan(ts, DrivingCommand.TURN_LEFT).points[0, 1] == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(-100, 100))
    def test_shift_invariance(self, scores, c):
        modes = np.stack([straight(i) for i in range(len(scores))])
        s = np.array(scores)
        a = select_plan(TrajectorySet(modes, s), DrivingCommand.GO_STRAIGHT)
        b = select_plan(TrajectorySet(modes, s + c), DrivingCommand.GO_STRAIGHT)
        if np.sum(s == s.max()) == 1 and np.sum((s + c) == (s + c).max()) == 1:
            np.testing.assert_array_equal(a.points, b.points)

    def test_empty(self):
        with pytest.raises(ValueError):
            select_plan({DrivingCommand.TURN_LEFT: TrajectorySet(np.zeros((0, 12, 2)), np.zeros(0))},
                        DrivingCommand.TURN_LEFT)


class TestRunFrame:
    def test_shape_contract(self, params, scene, small_cfg):
        out, state = run_frame(scene[0], PlannerState(params), small_cfg)
        assert len(out.detections) <= small_cfg.num_agent_anchors
        assert len(out.map) <= small_cfg.num_map_anchors
        assert len(out.agent_futures) == len(out.detections)
        assert all(f.modes.shape[1] == MOTION_STEPS for f in out.agent_futures)
        assert set(out.ego_plans) == set(DrivingCommand)
        assert all(p.modes.shape[1] == PLAN_STEPS and np.all(np.isfinite(p.scores)) for p in out.ego_plans.values())
        assert out.plan.points.shape == (PLAN_STEPS, 2)
        scores = [d.score for d in out.detections]
        assert scores == sorted(scores, reverse=True)

    def test_radar_off_equals_zero_points(self, params, scene, small_cfg):
        from dataclasses import replace
        empty = replace(scene[0], radar_points=())
        a, sa = run_frame(scene[0], PlannerState(params), small_cfg, use_radar=False)
        b, sb = run_frame(empty, PlannerState(params), small_cfg)
        np.testing.assert_array_equal(a.plan.points, b.plan.points)
        np.testing.assert_array_equal([d.anchor for d in a.detections], [d.anchor for d in b.detections])
        np.testing.assert_array_equal(sa.memory[0].features, sb.memory[0].features)

    def test_identical_frames_deterministic(self, params, scene, small_cfg):
        f = scene[1]
        s0 = PlannerState(params)
        a, s1 = run_frame(f, s0, small_cfg)
        b, _ = run_frame(f, s0, small_cfg)
        np.testing.assert_array_equal(a.plan.points, b.plan.points)
        np.testing.assert_array_equal([d.anchor for d in a.detections], [d.anchor for d in b.detections])
        # feeding the frame again: no time elapses, so the previous plan is compared unshifted
        c, _ = run_frame(f, s1, small_cfg)
        np.testing.assert_array_equal(c.plan.points, a.plan.points)
        assert tpc(c.plan.points, a.plan.points, shift=0)["avg"] == 0.0

    def test_memory_bounded(self, params, scene, small_cfg):
        state = PlannerState(params)
        stamps = []
        for f in list(scene) * 2:
            _, state = run_frame(f, state, small_cfg)
            stamps.append(f.timestamp)
            assert len(state.memory) <= MEMORY_FRAMES
        assert [m.timestamp for m in state.memory] == stamps[-MEMORY_FRAMES:]

    def test_config_mismatch(self, params, scene, small_cfg):
        from dataclasses import replace
        with pytest.raises(ValueError, match="num_agent_anchors"):
            run_frame(scene[0], PlannerState(params), replace(small_cfg, num_agent_anchors=41))

    def test_oracle_output_is_ground_truth(self, scene):
        f = scene[0]
        out = oracle_output(f)
        assert len(out.detections) == len(f.gt_agents)
        np.testing.assert_array_equal(out.plan.points, np.asarray(f.gt_ego_future)[:, :2])
