import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatdenoise.gaussian import build_covariance, logit, quat_to_rotmat
from splatdenoise.optimizer import (PARAMS, DenoiseOptimizer, DivergenceError, ExploreConfig,
                                    LRSchedule, OptimizerState, adam_step, apply_mean_update,
                                    exploration_factor, opacity_gate, spatial_denoise_term,
                                    stream_normals)

from .gradcheck import random_scene


def fake_grads(rng, scene):
    return {k: rng.normal(size=getattr(scene, k).shape) for k in PARAMS}


def test_lr_schedule_endpoints_and_geometric_midpoint():
    s = LRSchedule()
    assert s.mean_lr(0, 100) == pytest.approx(1.6e-3)
    assert s.mean_lr(100, 100) == pytest.approx(1.6e-5)
    assert s.mean_lr(50, 100) == pytest.approx(1.6e-4)
    assert s.mean_lr(500, 100) == pytest.approx(1.6e-5)


def test_adam_first_step_is_signed_lr():
    scene = random_scene(np.random.default_rng(0), 3)
    state = OptimizerState.for_scene(scene)
    g = {"means": np.array([[2.0, -3.0, 0.5]] * 3)}
    d = adam_step(state, g, {"means": 0.1})
    np.testing.assert_allclose(d["means"], -0.1 * np.sign(g["means"]), rtol=1e-12)
    assert state.step_count == 1


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(1)
    scene = random_scene(rng, 2)
    state = OptimizerState.for_scene(scene)
    m = v = np.zeros((2, 3))
    for t in range(1, 6):
        g = rng.normal(size=(2, 3))
        d = adam_step(state, {"means": g}, {"means": 0.01})["means"]
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = -0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-15)
        np.testing.assert_allclose(d, ref, rtol=1e-12)


def test_opacity_gate_shape():
    cfg = ExploreConfig()
    assert opacity_gate(0.005, cfg) == pytest.approx(0.5)
    assert opacity_gate(0.0, cfg) > 0.6
    assert opacity_gate(0.9, cfg) < 1e-30


def test_exploration_factor_covariance():
    rng = np.random.default_rng(2)
    cfg = ExploreConfig(tau=3.0)
    q, ls = rng.normal(size=4), rng.normal(size=3) * 0.3
    L = exploration_factor(ls, q, 0.01, 1e-3, cfg)
    gate = opacity_gate(0.01, cfg)
    np.testing.assert_allclose(L @ L.T, 2e-3 * 3.0 * gate**2 * build_covariance(ls, q), rtol=1e-10)
    np.testing.assert_allclose(L, L.T, atol=1e-15)


def test_stream_normals_depend_only_on_stream_id():
    full = stream_normals(7, 3, np.arange(10))
    part = stream_normals(7, 3, np.array([9, 2, 5]))
    np.testing.assert_array_equal(part, full[[9, 2, 5]])
    assert not np.array_equal(full, stream_normals(7, 4, np.arange(10)))
    assert not np.array_equal(full, stream_normals(8, 3, np.arange(10)))
    assert stream_normals(0, 0, np.array([], dtype=int)).shape == (0, 3)


def test_denoise_term_fires_on_shared_axis():
    ident = np.array([1.0, 0, 0, 0])
    np.testing.assert_array_equal(spatial_denoise_term(ident, [3.0, 1.0, 0.0], [-2.0, 1.0, 0.0]),
                                  [2.0, 0.0, 0.0])
    np.testing.assert_array_equal(spatial_denoise_term(ident, [-3.0, 1.0, 0.0], [2.0, 1.0, 0.0], -1.0),
                                  [2.0, 0.0, 0.0])
    np.testing.assert_array_equal(spatial_denoise_term(ident, [3.0, 1.0, 0.0], [0.0, 5.0, 0.0]), 0.0)


def test_denoise_term_ties_go_to_lowest_axis():
    ident = np.array([1.0, 0, 0, 0])
    out = spatial_denoise_term(ident, [1.0, -1.0, 1.0], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(out, [2.0, 0.0, 0.0])


@settings(max_examples=50)
@given(st.integers(0, 10**6))
def test_denoise_term_rotates_with_the_primitive(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    R = quat_to_rotmat(q)
    local, sg = rng.normal(size=3), rng.normal(size=3)
    world = spatial_denoise_term(q, R @ local, sg)
    ref = spatial_denoise_term(np.array([1.0, 0, 0, 0]), local, sg)
    np.testing.assert_allclose(world, R @ ref, atol=1e-12)
    # batched evaluation matches per-primitive evaluation
    batch = spatial_denoise_term(np.stack([q, q]), np.stack([R @ local] * 2), np.stack([sg] * 2))
    np.testing.assert_array_equal(batch[1], world)


def test_explore_config_validation():
    for bad in ({"alpha": -0.1}, {"beta1": 1.0}, {"beta2": 1.5}, {"tau": -1.0}, {"denoise_sign": 0.5}):
        with pytest.raises(ValueError):
            ExploreConfig(**bad)


def test_zero_coefficients_reduce_bitwise_to_adam():
    rng = np.random.default_rng(3)
    scene = random_scene(rng, 6)
    cfg = ExploreConfig(tau=0.0, alpha=0.0, beta2=0.0)
    opt = DenoiseOptimizer(LRSchedule(), 50, cfg)
    a, b = scene.copy(), scene.copy()
    sa, sb = OptimizerState.for_scene(a), OptimizerState.for_scene(b)
    for _ in range(20):
        g = fake_grads(rng, scene)
        opt.step(a, sa, g)
        deltas = adam_step(sb, g, LRSchedule().lrs(sb.step_count, 50))
        for k in PARAMS:
            setattr(b, k, getattr(b, k) + deltas[k])
        assert a.equals(b)


def test_momentum_drift_uses_previous_gradient():
    rng = np.random.default_rng(4)
    scene = random_scene(rng, 4)
    state = OptimizerState.for_scene(scene)
    cfg = ExploreConfig(tau=0.0, alpha=0.5, beta1=0.9, beta2=0.0)
    g1, g2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    zero = np.zeros((4, 3))
    new1 = apply_mean_update(state, scene, g1, zero, zero, 0.1, cfg, 0, 1)
    np.testing.assert_array_equal(new1, scene.means)  # momentum starts from a zero gradient
    new2 = apply_mean_update(state, scene, g2, zero, zero, 0.1, cfg, 0, 2)
    np.testing.assert_allclose(new2, scene.means - 0.5 * 0.1 * (0.1 * g1), rtol=1e-14)


def test_noise_is_gated_by_opacity():
    rng = np.random.default_rng(5)
    scene = random_scene(rng, 2)
    scene.raw_opacities[:] = logit(np.array([0.001, 0.9]))
    state = OptimizerState.for_scene(scene)
    cfg = ExploreConfig(tau=10.0, alpha=0.0, beta2=0.0)
    zero = np.zeros((2, 3))
    new = apply_mean_update(state, scene, zero, zero, zero, 1e-3, cfg, 0, 1)
    assert np.linalg.norm(new[0] - scene.means[0]) > 1e-4
    assert np.linalg.norm(new[1] - scene.means[1]) < 1e-25


def test_divergence_is_reported():
    scene = random_scene(np.random.default_rng(6), 3)
    state = OptimizerState.for_scene(scene)
    g = {k: np.zeros_like(getattr(scene, k)) for k in PARAMS}
    g["means"][1, 0] = np.nan
    with pytest.raises(DivergenceError):
        DenoiseOptimizer(LRSchedule(), 10, ExploreConfig(tau=0.0)).step(scene, state, g)


def test_state_keep_reset_grow():
    scene = random_scene(np.random.default_rng(7), 4)
    state = OptimizerState.for_scene(scene)
    state.adam_m["means"][:] = 1.0
    state.keep(np.array([True, False, True, True]))
    assert len(state) == 3 and state.adam_m["means"].shape == (3, 3)
    state.reset_rows([0])
    assert not state.adam_m["means"][0].any() and state.adam_m["means"][1].all()
    state.grow(2)
    assert len(state) == 5 and state.adam_v["raw_opacities"].shape == (5,)
