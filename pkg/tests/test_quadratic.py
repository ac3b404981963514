import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipecomp import quadratic as qd
from pipecomp.optim import sc_default_coeffs

FAST = qd.SearchSpec(n_eta=60, n_lambda=60, n_m=40, n_refine=11)


def test_gdm_no_momentum_is_linear_with_root_one_minus_el():
    p = qd.char_poly(qd.QuadraticRecurrence("gdm", 0.0, 0.3))
    assert p.size == 2
    assert qd.max_root_magnitude(p).roots[0].real == pytest.approx(0.7)


def test_gdm_hand_expansion():
    np.testing.assert_allclose(qd.char_poly(qd.QuadraticRecurrence("gdm", 0.5, 0.5)), [1.0, -1.0, 0.5])


@given(m=st.floats(0.0, 0.99), el=st.floats(1e-3, 4.0), D=st.integers(0, 8))
def test_lwp_with_zero_horizon_equals_gdm(m, el, D):
    np.testing.assert_array_equal(qd.char_poly(qd.QuadraticRecurrence("lwp", m, el, D, T=0.0)),
                                  qd.char_poly(qd.QuadraticRecurrence("gdm", m, el, D)))


@pytest.mark.parametrize("coeffs,r", [([1, -0.5], 0.5), ([1, 0, 0.25], 0.5), ([1, -1.5, 0.56], 0.8)])
def test_max_root_magnitude_examples(coeffs, r):
    res = qd.max_root_magnitude(coeffs)
    assert res.r_max == pytest.approx(r, abs=1e-8)
    assert len(res.roots) == len(coeffs) - 1


def test_degree_zero_rejected():
    with pytest.raises(ValueError):
        qd.max_root_magnitude([3.0])


@settings(max_examples=60)
@given(method=st.sampled_from(qd.METHODS), m=st.floats(0.0, 0.99), el=st.floats(1e-3, 4.0), D=st.integers(0, 10))
def test_reported_roots_are_roots(method, m, el, D):
    p = qd.char_poly(qd.QuadraticRecurrence(method, m, el, D))
    res = qd.max_root_magnitude(p)
    assert len(res.roots) == p.size - 1
    assert res.r_max == pytest.approx(np.abs(res.roots).max())
    for r in res.roots:
        scale = np.sum(np.abs(p) * np.abs(r) ** np.arange(p.size - 1, -1, -1))
        assert abs(np.polyval(p, r)) < 1e-6 * max(np.linalg.norm(p), scale)


def test_simulate_plain_gradient_descent():
    est = qd.simulate_recurrence(qd.QuadraticRecurrence("gdm", 0.0, 0.5), steps=400)
    assert est.rate == pytest.approx(0.5, abs=1e-9)
    np.testing.assert_allclose(qd.trajectory(qd.QuadraticRecurrence("gdm", 0.0, 0.5), 10), 0.5 ** np.arange(11))


def test_simulate_matches_roots_example():
    rec = qd.QuadraticRecurrence("gdm", 0.5, 0.3, 1)
    assert abs(qd.simulate_recurrence(rec).rate - qd.max_root_magnitude(qd.char_poly(rec)).r_max) < 1e-3


def test_lwp_zero_horizon_trajectory_equals_gdm():
    a = qd.trajectory(qd.QuadraticRecurrence("lwp", 0.8, 0.1, 3, T=0.0), 200)
    b = qd.trajectory(qd.QuadraticRecurrence("gdm", 0.8, 0.1, 3), 200)
    np.testing.assert_array_equal(a, b)


def test_simulate_flags_divergence():
    est = qd.simulate_recurrence(qd.QuadraticRecurrence("gdm", 0.0, 2.5), steps=1000)
    assert est.diverged and est.rate > 1.0


@settings(max_examples=40)
@given(method=st.sampled_from(qd.METHODS), m=st.floats(0.0, 0.95), el=st.floats(1e-2, 3.0), D=st.integers(0, 6))
def test_simulation_agrees_with_dominant_root(method, m, el, D):
    rec = qd.QuadraticRecurrence(method, m, el, D)
    r = qd.max_root_magnitude(qd.char_poly(rec)).r_max
    if r < 0.99:
        assert abs(qd.simulate_recurrence(rec, steps=2000).rate - r) < 1e-3


def test_heatmap_cells_equal_pointwise_calls():
    ms, els = np.linspace(0, 0.95, 7), np.geomspace(0.01, 3.0, 9)
    hm = qd.stability_heatmap("gsc", 2, ms, els)
    for i, m in enumerate(ms):
        for j, el in enumerate(els):
            r = qd.max_root_magnitude(qd.char_poly(qd.QuadraticRecurrence("gsc", m, el, 2))).r_max
            assert hm.r_max[i, j] == pytest.approx(r, rel=1e-9)
    rows = list(hm.rows())
    assert len(rows) == ms.size * els.size
    assert set(rows[0]) == {"m", "eta_lambda", "r_max", "stable"}


def test_heatmap_rejects_empty_grid():
    with pytest.raises(ValueError):
        qd.stability_heatmap("gdm", 0, [], [0.5])


def test_plain_gradient_descent_boundary():
    hm = qd.stability_heatmap("gdm", 0, [0.0], [1.99, 2.01])
    assert list(hm.unstable[0]) == [False, True]


def test_heavy_ball_boundary():
    hm = qd.stability_heatmap("gdm", 0, [0.9], [3.7, 3.9])
    assert list(hm.unstable[0]) == [False, True]
    assert not qd.simulate_recurrence(qd.QuadraticRecurrence("gdm", 0.9, 3.7)).diverged
    assert qd.simulate_recurrence(qd.QuadraticRecurrence("gdm", 0.9, 3.9), steps=20000).rate > 1.0


def test_sc_enlarges_stability_region_at_delay_one():
    ms, els = np.linspace(0.0, 0.99, 60), np.geomspace(1e-3, 4.0, 80)
    gdm = qd.stability_heatmap("gdm", 1, ms, els)
    gsc = qd.stability_heatmap("gsc", 1, ms, els)
    assert not np.any(~gdm.unstable & gsc.unstable)
    assert (~gsc.unstable).sum() > (~gdm.unstable).sum()


def test_explicit_coefficients_override_defaults():
    a, b = sc_default_coeffs(0.6, 3)
    assert qd.QuadraticRecurrence("gsc", 0.6, 0.1, 3).coefficients() == pytest.approx((a, b, 0.0))
    assert qd.QuadraticRecurrence("gsc", 0.6, 0.1, 3, a=0.2, b=0.4).coefficients() == (0.2, 0.4, 0.0)
    assert qd.QuadraticRecurrence("lwp", 0.6, 0.1, 3).coefficients() == (1.0, 0.0, 3.0)
    assert qd.QuadraticRecurrence("gdm", 0.6, 0.1, 3, a=5, T=9).coefficients() == (1.0, 0.0, 0.0)


def test_half_life_definition():
    assert qd.half_life(0.5) == pytest.approx(1.0)
    assert qd.half_life(0.0) == 0.0
    assert qd.half_life(1.0) == math.inf


def test_optimal_halflife_single_eigenvalue_is_zero():
    res = qd.optimal_halflife("gdm", 1.0, 0, search_spec=FAST)
    assert res.r_star == pytest.approx(0.0, abs=1e-7)
    assert res.half_life == pytest.approx(0.0, abs=1e-3)


def test_optimal_halflife_matches_heavy_ball():
    res = qd.optimal_halflife("gdm", 1e3, 0)
    assert res.r_star == pytest.approx(qd.heavy_ball_rate(1e3), abs=3e-3)
    assert res.half_life == pytest.approx(qd.half_life(qd.heavy_ball_rate(1e3)), rel=0.05)
    assert res.m_star == pytest.approx(qd.optimal_momentum_nodelay(1e3), abs=0.02)


def test_combined_beats_delayed_gdm_at_delay_five():
    gdm = qd.optimal_halflife("gdm", 1e3, 5, search_spec=FAST)
    comb = qd.optimal_halflife("lwp_w_plus_gsc", 1e3, 5, search_spec=FAST)
    assert comb.half_life < gdm.half_life


def test_optimal_halflife_monotone_in_kappa():
    for method in ("gdm", "gsc"):
        hl = [qd.optimal_halflife(method, k, 1, search_spec=FAST).half_life for k in (1.0, 10.0, 100.0, 1e3)]
        assert all(x <= y + 1e-9 for x, y in zip(hl, hl[1:]))


def test_optimal_momentum_nodelay():
    assert qd.optimal_momentum_nodelay(1.0) == 0.0
    assert qd.optimal_momentum_nodelay(1e3) == pytest.approx(0.8811, abs=1e-4)
    ks = np.geomspace(1, 1e6, 30)
    vals = [qd.optimal_momentum_nodelay(k) for k in ks]
    assert all(x <= y for x, y in zip(vals, vals[1:]))


def test_horizon_sweep_zero_scale_is_delayed_gdm():
    ms = np.linspace(0.0, 0.95, 12)
    rows = qd.momentum_horizon_sweep(1e3, 3, ms, [0.0], search_spec=FAST)
    spec = qd.SearchSpec(**{**FAST.to_dict(), "m_grid": tuple(ms)})
    _, r_gdm, _ = qd._best_per_momentum("gdm", 1e3, 3, spec, {})
    np.testing.assert_allclose([r["r_star"] for r in rows], r_gdm)


def test_horizon_sweep_gdm_optimum_has_no_momentum():
    rows = qd.momentum_horizon_sweep(1e3, 5, np.linspace(0.0, 0.99, 100), [0.0])
    best = min(rows, key=lambda r: r["half_life"])
    assert best["m"] < 0.1
