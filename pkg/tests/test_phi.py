import math

import numpy as np
import pytest

from stripldp.env import (
    EnvironmentSlice,
    EnvironmentSpec,
    c_lambda,
    lambda_crit_cap,
    sample_window,
)
from stripldp.phi import (
    SupercriticalError,
    divergence_bound,
    estimate_lambda_crit,
    hitting_kernels,
    kernels_to_phi,
    phi_derivative,
    phi_truncated,
    residual_norm,
    solve_phi_periodic,
    solve_phi_window,
)

from conftest import (
    d1_lambda_crit,
    d1_phi_closed,
    enumerate_truncated_phi,
    random_d2_iid_spec,
)


def window_for(spec, lo=-80, hi=80, seed=1):
    return sample_window(spec, lo, hi, seed=seed)


def test_phi_right_transient_stochastic(p075_spec):
    sol = solve_phi_window(window_for(p075_spec), 0.0)
    assert sol.at_level(20)[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_phi_left_transient_gamblers_ruin(p025_spec):
    sol = solve_phi_window(window_for(p025_spec), 0.0)
    assert sol.at_level(20)[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_phi_closed_form_positive_lambda(p075_spec):
    sol = solve_phi_window(window_for(p075_spec), 0.1)
    assert sol.at_level(20)[0, 0] == pytest.approx(d1_phi_closed(0.75, 0.1), abs=1e-12)


def test_residual_contract(p075_spec):
    sol = solve_phi_window(window_for(p075_spec), 0.05, tol=1e-12)
    assert residual_norm(sol) <= 1e-12


def test_supercritical_signal(p075_spec):
    lam_c = d1_lambda_crit(0.75)
    with pytest.raises(SupercriticalError):
        solve_phi_window(window_for(p075_spec, -400, 400), lam_c + 0.02)
    with pytest.raises(SupercriticalError):
        solve_phi_periodic(p075_spec, lam_c + 0.02)


def test_uniform_bounds_invariant():
    spec = random_d2_iid_spec(21, kappa=0.08)
    w = window_for(spec, -200, 200, seed=4)
    lc = estimate_lambda_crit(spec, window_len=2000, tol=1e-4, seed=4)
    for lam in (-1.0, -0.1, 0.0, lc.bracket[0] * 0.5):
        sol = solve_phi_window(w, lam, tol=1e-12)
        c = c_lambda(spec.kappa, lam)
        keep = sol.phis[sol.warmup_levels:]
        assert keep.min() >= c * (1 - 1e-11)
        assert keep.max() <= (1 / c) * (1 + 1e-11)


def test_monotone_in_lambda():
    spec = random_d2_iid_spec(8)
    w = window_for(spec, -60, 60, seed=2)
    a = solve_phi_window(w, -0.5).phis
    b = solve_phi_window(w, -0.2).phis
    assert (a <= b + 1e-15).all()


def test_truncated_single_path(p075_spec):
    w = window_for(p075_spec, -10, 1)
    assert phi_truncated(w, 0.0, 1, 0).entries[0, 0] == pytest.approx(0.75)


def test_truncated_two_paths_formula(p075_spec):
    # paths R (1 step, prob .75) and LRR (3 steps, prob .25*.75^2 = 0.140625)
    w = window_for(p075_spec, -10, 1)
    for lam in (-0.7, 0.0, 0.4):
        expect = 0.75 * math.exp(lam) + 0.140625 * math.exp(3 * lam)
        got = phi_truncated(w, lam, 3, 0).entries[0, 0]
        assert got == pytest.approx(expect, abs=1e-14)


def test_truncated_vs_enumeration_d2():
    spec = random_d2_iid_spec(5)
    w = window_for(spec, -6, 1, seed=3)
    for lam in (-1.0, 0.0, 0.5):
        dp = phi_truncated(w, lam, 4, 0).entries
        brute = enumerate_truncated_phi(w, 0, 4, lam)
        assert np.abs(dp - brute).max() < 1e-12


def test_truncation_monotone_and_converging(p075_spec):
    w = window_for(p075_spec, -300, 1)
    lam = 0.05
    full = solve_phi_window(w, lam).at_level(0)[0, 0]
    prev = 0.0
    gaps = []
    for j in range(0, 8):
        M = 2 ** j
        val = phi_truncated(w, lam, M, 0).entries[0, 0]
        assert val >= prev - 1e-15
        assert val <= full + 1e-12
        gaps.append(full - val)
        prev = val
    assert all(g2 <= g1 + 1e-15 for g1, g2 in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-6


def test_stochastic_rows_at_zero_right_transient():
    spec = random_d2_iid_spec(13, drift=0.5)
    w = window_for(spec, -300, 60, seed=6)
    sol = solve_phi_window(w, 0.0, tol=1e-12)
    keep = sol.phis[sol.warmup_levels:]
    rows = keep.sum(axis=2)
    assert np.abs(rows - 1.0).max() < 1e-11


def test_derivative_expected_hitting_time(p075_spec):
    w = window_for(p075_spec)
    dsol = phi_derivative(w, 0.0)
    assert dsol.at_level(20)[0, 0] == pytest.approx(2.0, abs=1e-10)


def test_derivative_fd_consistency_recurrent(recurrent_spec):
    w = window_for(recurrent_spec, -600, 30)
    lam, h = -0.5, 1e-5
    dsol = phi_derivative(w, lam)
    fd = (d1_phi_closed(0.5, lam + h) - d1_phi_closed(0.5, lam - h)) / (2 * h)
    assert dsol.at_level(10)[0, 0] == pytest.approx(fd, abs=1e-6)


def test_derivative_fd_consistency_window_d2():
    spec = random_d2_iid_spec(30)
    w = window_for(spec, -100, 40, seed=8)
    lam, h = -0.4, 1e-5
    dsol = phi_derivative(w, lam)
    up = solve_phi_window(w, lam + h).phis
    dn = solve_phi_window(w, lam - h).phis
    fd = (up - dn) / (2 * h)
    assert np.abs(dsol.phis - fd).max() < 1e-6


def test_derivative_dominates_phi():
    # T_{k+1} >= 1 so Phi'(i,j) >= Phi(i,j) entrywise
    spec = random_d2_iid_spec(9)
    w = window_for(spec, -50, 50, seed=1)
    for lam in (-3.0, -0.5, 0.0):
        sol = solve_phi_window(w, lam)
        dsol = phi_derivative(w, lam, phi_solution=sol)
        assert (dsol.phis >= sol.phis * (1 - 1e-12)).all()


def test_lambda_crit_d1_closed_form(p075_spec):
    lc = estimate_lambda_crit(p075_spec, tol=4e-7)
    assert lc.lambda_crit == pytest.approx(d1_lambda_crit(0.75), abs=1e-6)
    assert lc.bracket[0] <= lc.lambda_crit <= lc.bracket[1]
    assert lc.bracket[1] - lc.bracket[0] <= 4e-7
    assert lc.lambda_crit <= lambda_crit_cap(p075_spec.kappa)


def test_lambda_crit_recurrent_zero(recurrent_spec):
    lc = estimate_lambda_crit(recurrent_spec, tol=1e-6)
    assert lc.lambda_crit == pytest.approx(0.0, abs=1e-6)


def test_lambda_crit_reflection(p075_spec):
    tol = 1e-5
    lc = estimate_lambda_crit(p075_spec, tol=tol)
    lci = estimate_lambda_crit(p075_spec.invert(), tol=tol)
    assert abs(lc.lambda_crit - lci.lambda_crit) <= 2 * tol


def test_divergence_bound_regimes():
    assert divergence_bound(0.25, 0.5) == pytest.approx(4.0 * math.exp(-0.5), rel=1e-6)
    # subprobability regime: entries can never exceed 1
    assert divergence_bound(0.25, -1.0) == pytest.approx(1.0, abs=1e-9)


def test_hitting_kernels_mass(p075_spec):
    w = window_for(p075_spec, -20, 1)
    W = hitting_kernels(w, 0, 9)
    # odd excursion lengths only on a width-1 strip with r = 0
    assert W[1].sum() == 0.0 and W[3].sum() == 0.0
    assert kernels_to_phi(W, 0.0)[0, 0] == pytest.approx(
        sum(W[m][0, 0] for m in range(9)), abs=1e-15
    )


def test_periodic_matches_window(p075_spec):
    pp = solve_phi_periodic(p075_spec, -0.3, tol=1e-14)
    sol = solve_phi_window(window_for(p075_spec, -200, 10), -0.3)
    assert pp.phis[0, 0, 0] == pytest.approx(sol.at_level(5)[0, 0], abs=1e-11)


def test_period2_environment():
    a = EnvironmentSlice(q=[[0.3]], r=[[0.0]], p=[[0.7]])
    b = EnvironmentSlice(q=[[0.2]], r=[[0.1]], p=[[0.7]])
    spec = EnvironmentSpec(kind="periodic", d=1, kappa=0.15, slices=(a, b))
    pp = solve_phi_periodic(spec, -0.2, tol=1e-14)
    w = sample_window(spec, -400, 8)
    sol = solve_phi_window(w, -0.2)
    assert pp.phis[0, 0, 0] == pytest.approx(sol.at_level(0)[0, 0], abs=1e-11)
    assert pp.phis[1, 0, 0] == pytest.approx(sol.at_level(1)[0, 0], abs=1e-11)
    assert pp.phis[0, 0, 0] != pytest.approx(pp.phis[1, 0, 0], abs=1e-4)
