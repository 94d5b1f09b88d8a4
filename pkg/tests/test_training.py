import math

import numpy as np
import pytest

from radarfuse.core import COS, SIN, X, Y
from radarfuse.planner import init_params
from radarfuse.training import (Adam, TrainConfig, TrainingDiverged, cache_frame, dataset_loss, encode_scene,
                                train)


@pytest.fixture(scope="module")
def setup(small_cfg, scene):
    params = init_params(small_cfg, 0, scene)
    feats = encode_scene(scene, params, True)
    rng = np.random.default_rng(0)
    # move away from the initialisation so every head contributes a gradient
    arrays = {k: v + rng.normal(0, 0.05, v.shape) for k, v in params.heads.arrays.items()}
    cache = [cache_frame(f, ff, params.heads) for f, ff in zip(scene, feats)]
    return params, arrays, cache


def test_gradient_matches_central_differences(setup, small_cfg):
    params, arrays, cache = setup
    cfg = TrainConfig(fusion=small_cfg)
    pairs: list = []
    _, _, grads = dataset_loss(arrays, cache, cfg, pairs)
    rng = np.random.default_rng(1)
    eps = 1e-6
    # motion is anchored at the decoded boxes without back-propagating into them, so the detection
    # columns for x, y and heading are excluded from the check
    stop = {3 + X, 3 + Y, 3 + SIN, 3 + COS}
    for key, a in arrays.items():
        cols = [c for c in range(a.shape[-1]) if key != "det" or c not in stop]
        for _ in range(6):
            idx = tuple(int(rng.integers(n)) for n in a.shape[:-1]) + (int(rng.choice(cols)),)
            hi = {k: v.copy() for k, v in arrays.items()}
            lo = {k: v.copy() for k, v in arrays.items()}
            hi[key][idx] += eps
            lo[key][idx] -= eps
            # the detection matching stays fixed inside such a small step; polylines reuse the pairs
            fd = (dataset_loss(hi, cache, cfg, pairs)[0] - dataset_loss(lo, cache, cfg, pairs)[0]) / (2 * eps)
            assert grads[key][idx] == pytest.approx(fd, rel=1e-4, abs=1e-7), (key, idx)


def test_adam_first_step_moves_by_lr():
    opt = Adam(0.1)
    out = opt.update({"w": np.array([1.0, -2.0, 3.0])}, {"w": np.array([4.0, -0.5, 0.0])})
    np.testing.assert_allclose(out["w"], [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_minimises_quadratic():
    opt = Adam(0.05)
    w = {"w": np.array([3.0, -4.0])}
    for _ in range(500):
        w = opt.update(w, {"w": 2 * w["w"]})
    assert np.linalg.norm(w["w"]) < 0.05


def test_zero_epochs_is_initialisation(scene, small_cfg):
    r = train([scene], TrainConfig(epochs=0, seed=4, fusion=small_cfg))
    want = init_params(small_cfg, 4, scene)
    assert r.history == []
    for k, v in want.heads.arrays.items():
        np.testing.assert_array_equal(r.params.heads.arrays[k], v)


def test_loss_decreases(scene, small_cfg):
    for seed in (0, 1):
        r = train([scene], TrainConfig(epochs=6, seed=seed, fusion=small_cfg))
        losses = [h["loss"] for h in r.history]
        assert all(math.isfinite(x) for x in losses)
        assert losses[-1] <= losses[0]
        assert len(losses) == 7


def test_deterministic(scene, small_cfg):
    a = train([scene], TrainConfig(epochs=3, seed=2, fusion=small_cfg))
    b = train([scene], TrainConfig(epochs=3, seed=2, fusion=small_cfg))
    for k in a.params.heads.arrays:
        np.testing.assert_array_equal(a.params.heads.arrays[k], b.params.heads.arrays[k])
    assert a.history == b.history


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(scene, small_cfg):
    cfg = TrainConfig(epochs=4, seed=0, fusion=small_cfg, lr=1e300)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train([scene], cfg)


def test_no_frames():
    with pytest.raises(ValueError):
        train([], TrainConfig(epochs=1))
