import math

import numpy as np
import pytest

from stripldp.env import homogeneous_d1_spec, two_point_d1_spec
from stripldp.lmgf import LmgfEvaluator, analyze_environment
from stripldp.rates import (
    TiltedMeasure,
    averaged_rate_upper,
    averaged_speed_upper,
    golden_max,
    hitting_rate_curve,
    legendre_point,
    refined_t_grid,
    speed_rate_curve,
)

from conftest import d1_lambda_crit, d1_phi_closed, random_d2_iid_spec


def brute_force_J(p, t, lam_lo=-12.0, n_pts=200_001):
    lam_hi = d1_lambda_crit(p) - 1e-12
    grid = np.linspace(lam_lo, lam_hi, n_pts)
    vals = [l * t - math.log(d1_phi_closed(p, l)) for l in grid]
    return max(vals)


@pytest.fixture(scope="module")
def p075_analysis(p075_spec):
    return analyze_environment(p075_spec, n_levels=2000, seed=0)


@pytest.fixture(scope="module")
def p075_evaluator(p075_spec):
    return LmgfEvaluator(p075_spec, n_levels=2000, seed=0)


def test_golden_max_quadratic():
    x, v = golden_max(lambda u: -(u - 0.3) ** 2 + 1.0, -2.0, 2.0, xtol=1e-10)
    assert x == pytest.approx(0.3, abs=1e-8)
    assert v == pytest.approx(1.0, abs=1e-14)


def test_legendre_at_lln_point(p075_evaluator, p075_analysis):
    lc = p075_analysis.lambda_crit
    j, lam, _, _ = legendre_point(p075_evaluator.value, 2.0, lc.bracket[0], 0.25)
    assert abs(j) < 1e-10
    assert abs(lam) < 1e-4


def test_legendre_at_one(p075_evaluator, p075_analysis):
    lc = p075_analysis.lambda_crit
    j, lam, _, _ = legendre_point(p075_evaluator.value, 1.0, lc.bracket[0], 0.25)
    assert j == pytest.approx(-math.log(0.75), abs=1e-12)
    assert lam == -30.0


def test_legendre_below_one_infinite(p075_evaluator):
    j, lam, _, _ = legendre_point(p075_evaluator.value, 0.7, 0.14, 0.25)
    assert j == math.inf


def test_legendre_brute_force_grid(p075_evaluator, p075_analysis):
    lc = p075_analysis.lambda_crit
    for t in (1.5, 3.0, 5.0):
        j, _, _, _ = legendre_point(p075_evaluator.value, t, lc.bracket[0], 0.25)
        assert j == pytest.approx(brute_force_J(0.75, t), abs=1e-6)


def test_legendre_linear_branch_exact(p075_evaluator):
    # synthetic evaluator check of the t >= t* branch: exact linear values
    j, lam, _, _ = legendre_point(
        p075_evaluator.value, 800.0, 0.1438, 0.25,
        t_star=700.0, value_at_crit=0.55,
    )
    assert j == pytest.approx(0.1438 * 800.0 - 0.55, abs=1e-12)
    assert lam == 0.1438


def test_hitting_curve_shape(p075_spec, p075_analysis):
    grid = refined_t_grid(2.0, 1.0, 6.0, 21)
    curve = hitting_rate_curve(p075_spec, grid, n_levels=2000, seed=0,
                               analysis=p075_analysis)
    assert curve.warnings == []
    assert curve.kind == "hitting"
    i0 = int(np.argmin(np.abs(curve.abscissae - 2.0)))
    assert curve.values[i0] < 1e-10
    left = curve.values[curve.abscissae <= 2.0]
    right = curve.values[curve.abscissae >= 2.0]
    assert (np.diff(left) <= 1e-9).all()
    assert (np.diff(right) >= -1e-9).all()


def test_hitting_curve_grid_validation(p075_spec, p075_analysis):
    with pytest.raises(ValueError):
        hitting_rate_curve(p075_spec, [0.5, 2.0], analysis=p075_analysis)
    with pytest.raises(ValueError):
        hitting_rate_curve(p075_spec, [2.0, 3.0], M=4, analysis=p075_analysis)


def test_truncated_curve_monotone_in_M(p075_spec, p075_analysis):
    vals = []
    for M in (8, 16, 32, 64):
        curve = hitting_rate_curve(p075_spec, [3.0], n_levels=500, seed=0,
                                   M=M, analysis=p075_analysis)
        vals.append(curve.values[0])
        # the maximizer satisfies Lambda'_M(lambda_{t,M}) = t by construction
        ev = LmgfEvaluator(p075_spec, n_levels=500, seed=0)
        assert ev.derivative_truncated(curve.maximizer_trace[0], M).value == \
            pytest.approx(3.0, abs=1e-6)
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(brute_force_J(0.75, 3.0), abs=1e-3)


def test_recurrent_rate_positive_decaying(recurrent_spec):
    an = analyze_environment(recurrent_spec, n_levels=1500, seed=0)
    grid = np.array([1.5, 3.0, 8.0, 20.0, 60.0])
    curve = hitting_rate_curve(recurrent_spec, grid, n_levels=1500, seed=0,
                               analysis=an)
    assert (curve.values > 0).all()
    assert (np.diff(curve.values) < 0).all()
    assert curve.values[-1] < 0.02  # inf_t J = lim J(t) = 0


def test_left_transient_inf_rate(p025_spec):
    an = analyze_environment(p025_spec, n_levels=1500, seed=0)
    grid = np.array([1.5, 2.5, 4.0, 8.0, 16.0])
    curve = hitting_rate_curve(p025_spec, grid, n_levels=1500, seed=0, analysis=an)
    # inf_t J = -Lambda(0) = log 3 for p = 1/4, recorded on the curve
    assert curve.values.min() >= math.log(3.0) - 1e-6
    assert curve.inf_rate == pytest.approx(math.log(3.0), abs=1e-8)
    assert "inf_rate=" in curve.to_csv()


def test_speed_curve_values(p075_spec, p075_analysis):
    grid = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    curve = speed_rate_curve(p075_spec, grid, n_levels=2000, seed=0,
                             analysis=p075_analysis)
    assert curve.values[3] < 1e-10  # zero at v0
    assert curve.values[2] == pytest.approx(d1_lambda_crit(0.75), abs=1e-5)
    assert curve.values[4] == pytest.approx(-math.log(0.75), abs=1e-10)
    # I(-0.5) = 0.5 * J_inv(2) against the p=0.25 brute force
    assert curve.values[1] == pytest.approx(0.5 * brute_force_J(0.25, 2.0), abs=1e-6)
    assert curve.warnings == []


def test_speed_symmetric_spec(recurrent_spec):
    an = analyze_environment(recurrent_spec, n_levels=1500, seed=0)
    grid = np.array([-0.8, -0.4, -0.1, 0.1, 0.4, 0.8])
    curve = speed_rate_curve(recurrent_spec, grid, n_levels=1500, seed=0,
                             analysis=an)
    assert np.abs(curve.values - curve.values[::-1]).max() < 1e-8


def test_duality_roundtrip(p075_spec, p075_analysis, p075_evaluator):
    # sup_t { lambda t - J(t) } recovers Lambda(lambda) on a fine grid
    grid = np.linspace(1.0, 12.0, 140)
    curve = hitting_rate_curve(p075_spec, grid, n_levels=2000, seed=0,
                               analysis=p075_analysis)
    for lam in (-0.5, 0.0, 0.1):
        rec = (lam * grid - curve.values).max()
        assert rec == pytest.approx(p075_evaluator.value(lam).value, abs=2e-3)


def test_tilted_measure_entropy():
    tm = TiltedMeasure(weights=(0.5, 0.5), base_weights=(0.5, 0.5))
    assert tm.entropy == 0.0
    tm2 = TiltedMeasure(weights=(0.7, 0.3), base_weights=(0.5, 0.5))
    assert tm2.entropy > 0.0
    with pytest.raises(ValueError):
        TiltedMeasure(weights=(0.7, 0.2), base_weights=(0.5, 0.5))


def test_averaged_point_mass_equals_quenched():
    spec = two_point_d1_spec([0.75], [1.0])
    grid = np.array([1.8, 2.5, 3.5])
    up = averaged_rate_upper(spec, grid, n_levels=1200, seed=0)
    q = hitting_rate_curve(spec, grid, n_levels=1200, seed=0)
    assert np.abs(up.values - q.values).max() <= 1e-9


def test_averaged_two_point_bounds():
    spec = two_point_d1_spec([0.7, 0.8], [0.5, 0.5])
    an = analyze_environment(spec, n_levels=2000, seed=0)
    t0 = an.t0
    grid = np.array([round(t0, 3), 4.0])
    up = averaged_rate_upper(spec, grid, n_levels=2000, seed=0)
    q = hitting_rate_curve(spec, grid, n_levels=2000, seed=0, analysis=an)
    assert (up.values <= q.values + 1e-9).all()
    assert up.values[0] < 1e-6  # zero set shared with the quenched rate
    assert up.warnings == []  # weak duality holds
    # pure environments are feasible points of the variational problem
    for p_pure, w_idx in ((0.7, 0), (0.8, 1)):
        h_point = -math.log(0.5)  # KL(point mass || (1/2,1/2)) per level
        assert up.values[1] <= brute_force_J(p_pure, 4.0) + h_point + 1e-6


def test_averaged_speed_upper_bounds():
    spec = two_point_d1_spec([0.7, 0.8], [0.5, 0.5])
    grid = np.array([-0.4, 0.0, 0.3, 0.5])
    iu = averaged_speed_upper(spec, grid, n_levels=1200, seed=0)
    # share the analysis so both curves carry the same lambda_crit at x=0
    ic = speed_rate_curve(spec, grid, n_levels=1200, seed=0,
                          analysis=iu.metadata)
    assert (iu.values <= ic.values + 1e-9).all()
    assert iu.values[1] == pytest.approx(
        ic.metadata.lambda_crit.lambda_crit, abs=1e-9)
    # zero at the LLN speed
    an = iu.metadata
    v0_grid = np.array([an.v0])
    iu0 = averaged_speed_upper(spec, v0_grid, n_levels=1200, seed=0)
    assert iu0.values[0] < 1e-6


def test_csv_format_and_metadata(p075_spec, p075_analysis):
    curve = hitting_rate_curve(p075_spec, [1.5, 2.0], n_levels=500, seed=3,
                               analysis=p075_analysis)
    text = curve.to_csv()
    assert "# kind=hitting" in text
    assert "# t0=" in text and "# spec_hash=" in text
    body = [l for l in text.splitlines() if not l.startswith("#")]
    assert body[0] == "abscissa,value,argmax_lambda,det_error,stat_error"
    assert len(body) == 3
    first = body[1].split(",")
    assert float(first[0]) == 1.5


def test_refined_grid_clusters():
    g = refined_t_grid(2.0, 1.0, 6.0, 31)
    assert g[0] == 1.0 and g[-1] == 6.0
    assert 2.0 in g
    spacing_near = np.diff(g)[np.argmin(np.abs(g[:-1] - 2.0))]
    assert spacing_near < 0.01


def test_speed_curve_midpoint_convex_through_zero(p075_spec, p075_analysis):
    grid = np.linspace(-0.9, 0.9, 13)
    curve = speed_rate_curve(p075_spec, grid, n_levels=1500, seed=0,
                             analysis=p075_analysis)
    v = curve.values
    for i in range(1, len(grid) - 1):
        assert v[i] <= 0.5 * (v[i - 1] + v[i + 1]) + 1e-6


def test_averaged_dual_check_near_criticality():
    # shorter windows put the top of the dual lambda-grid past the window's
    # own divergence onset; the cross-check must skip uncertifiable points
    # rather than compare against garbage finite values (regression)
    spec = two_point_d1_spec([0.7, 0.8], [0.5, 0.5])
    grid = np.array([2.2, 2.6, 3.0, 3.4])
    up = averaged_rate_upper(spec, grid, n_levels=1200, seed=0)
    q = hitting_rate_curve(spec, grid, n_levels=1200, seed=0)
    assert up.warnings == []
    assert (up.values <= q.values + 1e-9).all()
