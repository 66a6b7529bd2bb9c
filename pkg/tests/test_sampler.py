import json

import numpy as np
import pytest
from scipy.spatial import cKDTree

from graspfield.grids import grid_from_function
from graspfield.latent import (ShapeLibrary, decode, fit_codec, interpolate,
                               library_from_grids, oracle_velocity,
                               target_velocity)
from graspfield.meshing import extract_surface
from graspfield.objectives import ni_loss
from graspfield.primitives import Sphere, analytic_sdf
from graspfield.sampler import (ControlState, SamplerConfig, SamplerDivergence,
                                clean_estimate, guidance_gradient, sample,
                                save_trajectory, stabilize)
from graspfield.touch import ContactSet, build_touch_tensor


def test_config_default_grid():
    cfg = SamplerConfig(steps=50, t_end=1e-3)
    times = cfg.grid()
    assert times.size == 51
    assert times[0] == 1.0
    assert times[-1] == pytest.approx(1e-3)
    steps = -np.diff(times)
    assert np.allclose(steps, steps[0])
    assert (steps > 0).all()


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(beta=1.0).validate()
    with pytest.raises(ValueError):
        SamplerConfig(eta=0.0).validate()
    with pytest.raises(ValueError):
        SamplerConfig(t_end=0.0).validate()
    with pytest.raises(ValueError):
        SamplerConfig(time_grid=np.array([1.0, 0.5, 0.6, 0.1])).grid()
    with pytest.raises(ValueError):
        SamplerConfig(time_grid=np.array([0.9, 0.5, 0.1])).grid()
    custom = SamplerConfig(time_grid=np.array([1.0, 0.3, 0.01]))
    assert custom.grid().size == 3


def test_clean_estimate_round_trip():
    rng = np.random.default_rng(0)
    for sm in (0.0, 1e-3, 0.1):
        x0 = rng.standard_normal(6)
        eps = rng.standard_normal(6)
        t = rng.uniform(0.01, 0.99)
        xt = interpolate(x0, eps, t, sm)
        v = target_velocity(x0, eps, sm)
        err = np.abs(clean_estimate(xt, v, t, sm) - x0).max()
        assert err <= 1e-10


def test_clean_estimate_simplified_form():
    rng = np.random.default_rng(1)
    xt = rng.standard_normal(4)
    v = rng.standard_normal(4)
    t = 0.37
    np.testing.assert_allclose(clean_estimate(xt, v, t, 0.0), xt - t * v,
                               rtol=0, atol=1e-14)
    # t -> 0 leaves the state untouched
    np.testing.assert_allclose(clean_estimate(xt, v, 1e-9, 0.0), xt,
                               rtol=0, atol=1e-8)


def test_clean_estimate_degenerate_raises():
    with pytest.raises(ValueError):
        clean_estimate(np.zeros(2), np.zeros(2), np.nan, 1e-3)


@pytest.fixture(scope="module")
def guided_setup():
    grids = [analytic_sdf(Sphere(np.zeros(3), r), 16) for r in (0.3, 0.5)]
    codec = fit_codec(grids, 2)
    lib = library_from_grids(codec, grids, sigma_min=1e-3)
    hand = grid_from_function(lambda p: p[:, 0] + 0.2, 16)
    pts = np.array([[0.0, 0.0, 0.45], [0.0, 0.45, 0.0]])
    touch = build_touch_tensor(ContactSet(pts, np.zeros(2, int)), 16)
    field = lambda x, t, cond=None: oracle_velocity(x, t, lib)
    return codec, lib, hand, touch, field


def test_guidance_gradient_matches_fd(guided_setup):
    codec, lib, hand, touch, _ = guided_setup
    cfg = SamplerConfig(lam_ni=1.0, lam_c=1.0, guidance_enabled=True)
    rng = np.random.default_rng(2)
    x = lib.latents[1] + 0.3 * rng.standard_normal(2)
    t = 0.2
    v_fixed = oracle_velocity(x, t, lib)
    frozen = lambda xx, tt, cond=None: v_fixed
    g, terms = guidance_gradient(x, t, codec, hand, touch, cfg, frozen)
    assert terms["E"] > 0

    def energy(xx):
        _, tm = guidance_gradient(xx, t, codec, hand, touch, cfg, frozen)
        return tm["E"]

    h = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (energy(x + e) - energy(x - e)) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-3, abs=1e-8)


def test_guidance_gradient_zero_lambdas(guided_setup):
    codec, lib, hand, touch, field = guided_setup
    cfg = SamplerConfig(lam_ni=0.0, lam_c=0.0)
    g, terms = guidance_gradient(lib.latents[1], 0.3, codec, hand, touch,
                                 cfg, field)
    assert np.all(g == 0)
    assert terms["E"] == 0.0


def test_guidance_gradient_disjoint_hand(guided_setup):
    codec, lib, _, _, field = guided_setup
    far_hand = grid_from_function(lambda p: np.full(len(p), 0.9), 16)
    empty = build_touch_tensor(ContactSet(np.empty((0, 3)), np.empty(0, int)),
                               16)
    cfg = SamplerConfig(lam_ni=2.0, lam_c=2.0)
    g, terms = guidance_gradient(lib.latents[0], 0.1, codec, far_hand, empty,
                                 cfg, field)
    assert np.all(g == 0)
    assert terms["ni"] == 0.0 and terms["c"] == 0.0


def test_stabilize_single_step_and_series():
    cfg = SamplerConfig(beta=0.9, eta=0.1, trust_ratio=1e9,
                        projection_enabled=False)
    ghat = np.array([1.0, 0.0])
    v = np.array([100.0, 0.0])
    state = ControlState.zero(2)
    state = stabilize(ghat, v, state, cfg)
    np.testing.assert_allclose(state.theta, 0.1 * ghat)
    for n in range(2, 30):
        state = stabilize(ghat, v, state, cfg)
        expect = (1 - 0.9 ** n) * ghat
        np.testing.assert_allclose(state.theta, expect, rtol=1e-12)


def test_stabilize_zero_gradient_decays():
    cfg = SamplerConfig(beta=0.8, eta=0.1, trust_ratio=1e9)
    state = ControlState(np.array([1.0, 0.0]), np.zeros(2))
    for k in range(1, 6):
        state = stabilize(np.zeros(2), np.ones(2), state, cfg)
        assert np.linalg.norm(state.theta) == pytest.approx(0.8 ** k)


def test_stabilize_trust_region_and_projection():
    cfg = SamplerConfig(beta=0.9, eta=10.0, trust_ratio=0.0)
    state = stabilize(np.array([1.0, 1.0]), np.array([3.0, 0.0]),
                      ControlState.zero(2), cfg)
    assert np.linalg.norm(state.theta) == 0.0

    cfg = SamplerConfig(beta=1.0 - 1e-12, eta=0.05, trust_ratio=10.0,
                        projection_enabled=True)
    # carried-over theta points against the new gradient direction
    state = ControlState(np.array([-1.0, 0.0]), np.zeros(2))
    out = stabilize(np.array([1.0, 0.0]), np.array([1.0, 0.0]), state, cfg)
    assert out.theta @ np.array([1.0, 0.0]) >= 0

    cfg2 = SamplerConfig(beta=0.9, eta=0.05, trust_ratio=0.5)
    st = ControlState.zero(2)
    for _ in range(50):
        st = stabilize(np.array([0.3, -0.8]), np.array([0.2, 0.1]), st, cfg2)
        cap = 0.5 * np.linalg.norm([0.2, 0.1])
        assert np.linalg.norm(st.theta) <= cap + 1e-12


def test_sample_constant_field_telescopes(guided_setup):
    codec, _, _, _, _ = guided_setup
    c = np.array([0.7, -0.3])
    cfg = SamplerConfig(steps=37, t_end=1e-3, seed=5)
    x, _, records = sample(lambda x, t, cond=None: c, None, codec, None, None,
                           cfg)
    x1 = np.random.default_rng(5).standard_normal(2)
    np.testing.assert_allclose(x, x1 - c * (1.0 - 1e-3), rtol=0, atol=1e-12)
    assert len(records) == 37


def test_sample_single_entry_lands_on_surface():
    grid = analytic_sdf(Sphere(np.zeros(3), 0.4), 16)
    codec = fit_codec([grid], 1)
    lib = library_from_grids(codec, [grid], sigma_min=1e-3)
    field = lambda x, t, cond=None: oracle_velocity(x, t, lib)
    cfg = SamplerConfig(steps=200, t_end=1e-3, seed=3)
    _, out, _ = sample(field, None, codec, None, None, cfg)
    h = 2.0 / 16
    ref = extract_surface(grid)
    got = extract_surface(out)
    d, _ = cKDTree(ref.vertices).query(got.vertices)
    d2, _ = cKDTree(got.vertices).query(ref.vertices)
    cd = 0.5 * (np.mean(d ** 2) + np.mean(d2 ** 2))
    assert cd <= (2 * h) ** 2


def test_sample_guidance_reduces_penetration(guided_setup):
    codec, lib, hand, touch, field = guided_setup
    base = SamplerConfig(steps=80, seed=11, guidance_enabled=False,
                         lam_ni=1.0, lam_c=0.0)
    guided = SamplerConfig(steps=80, seed=11, guidance_enabled=True,
                           lam_ni=1.0, lam_c=0.0)
    _, out_u, rec_u = sample(field, None, codec, hand, touch, base)
    _, out_g, rec_g = sample(field, None, codec, hand, touch, guided)
    ni_u = ni_loss(out_u, hand, 0.1)[0]
    ni_g = ni_loss(out_g, hand, 0.1)[0]
    assert rec_u[-1]["theta_norm"] == 0.0
    assert ni_g < ni_u
    for rec in rec_g:
        assert rec["theta_norm"] <= 0.5 * rec["v_norm"] + 1e-12


def test_sample_guidance_noop_is_exact(guided_setup):
    codec, lib, hand, touch, field = guided_setup
    cfg_a = SamplerConfig(steps=40, seed=7, guidance_enabled=False)
    x_a, _, _ = sample(field, None, codec, hand, touch, cfg_a)
    cfg_b = SamplerConfig(steps=40, seed=7, guidance_enabled=False)
    x_b, _, _ = sample(field, None, codec, None, None, cfg_b)
    np.testing.assert_array_equal(x_a, x_b)
    x_c, _, _ = sample(field, None, codec, hand, touch,
                       SamplerConfig(steps=40, seed=7))
    np.testing.assert_array_equal(x_a, x_c)


def test_sample_nonfinite_aborts(guided_setup):
    codec, _, _, _, _ = guided_setup
    bad = lambda x, t, cond=None: np.full(2, np.inf)
    with pytest.raises(SamplerDivergence, match="step 0"):
        sample(bad, None, codec, None, None, SamplerConfig(steps=10))


def test_trajectory_log_round_trip(guided_setup, tmp_path):
    codec, lib, hand, touch, field = guided_setup
    cfg = SamplerConfig(steps=12, seed=1, guidance_enabled=True)
    _, _, records = sample(field, None, codec, hand, touch, cfg)
    assert set(records[0]) == {"k", "t", "E", "ni", "c", "theta_norm", "v_norm"}
    p = tmp_path / "traj.jsonl"
    save_trajectory(records, p)
    lines = [json.loads(l) for l in p.read_text().splitlines()]
    assert lines == records
