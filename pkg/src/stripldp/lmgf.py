"""Asymptotic quenched log-MGF of hitting times per level.

For lambda up to the critical exponent,

    Lambda(lambda) = E[ log( mu_0(lambda) Phi_0(lambda) 1 ) ],

with derivative E[ mu_0 Phi'_0 nu_1 / (mu_0 Phi_0 nu_1) ].

Two evaluation paths:

* periodic specs — exact: the periodic Phi fixed point plus periodic
  direction eigenvectors, averaged over one period (the Birkhoff average of
  a periodic sequence is its one-period mean). Statistical error is zero.

* i.i.d. specs — one sampled window; the estimate is
  (1/n) log( pi Phi_[0,n-1] 1 ) with a *fixed* uniform start pi at level 0.
  The matching derivative estimator rolls left directions from the same pi
  and right directions from the all-ones vector at level n, which makes it
  the exact lambda-derivative of the value estimate (finite-difference
  consistency holds to truncation error). The distance to the bi-infinite
  Lambda is controlled by the geometric-forgetting window bound
  2 / ((1-c^4) c^10 n) with c measured from the factors.

The scalars derived from Lambda: t0 = Lambda'(0-) (the hitting-time LLN
constant, 1/v0 for right-transient walks), t* = Lambda'(lambda_crit-), and
the transience regime read off the sign of Lambda(0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import EnvironmentSpec, EnvironmentWindow, n_kappa, sample_window
from .phi import (
    ConvergenceError,
    _check_truncated_range,
    CriticalExponent,
    SupercriticalError,
    estimate_lambda_crit,
    hitting_kernels,
    periodic_phi_derivative,
    periodic_truncated_kernels,
    solve_phi_periodic,
    solve_phi_window,
    phi_derivative,
)

DEFAULT_MARGIN = 320
FP_TOL = 1e-13


@dataclass(frozen=True)
class LmgfEstimate:
    lam: float
    value: float
    deterministic_error: float
    statistical_error: float
    n: int
    kind: str = "full"  # full | truncated | derivative | truncated-derivative
    M: int | None = None
    supercritical: bool = False
    boundary_bias: float = 0.0  # measured left-boundary influence (part of det error)

    def total_error(self) -> float:
        return self.deterministic_error + self.statistical_error


def _paper_window_bound(c: float, n: int) -> float:
    c = min(c, 1.0 - 1e-9)
    return 2.0 / ((1.0 - c**4) * c**10 * n)


def _det_cap(kappa: float, lam: float, d: int) -> float:
    """Rigorous cap on |estimate - Lambda|: both lie in the sandwich interval
    [lam + log kappa, lam] for lam <= 0, resp. a log(2d/kappa^2)-wide band for
    0 < lam <= lambda_crit, so the window formula never needs to exceed this."""
    if lam <= 0:
        return -math.log(kappa)
    return math.log(2.0 * d / (kappa * kappa))


def _measured_c(entries: np.ndarray) -> float:
    lo = float(entries.min())
    hi = float(entries.max())
    if lo <= 0:
        return 1e-12
    return max(min(lo, 1.0 / hi), 1e-12)


def _sandwich_check(lam: float, value: float, kappa: float, slack: float) -> None:
    # kappa^n e^{lam n} <= E[e^{lam T_n}; T_n < inf] <= e^{lam n} for lam <= 0
    if lam <= 0 and not (lam + math.log(kappa) - slack <= value <= lam + slack):
        raise RuntimeError(
            f"log-MGF sandwich violated: lambda={lam}, value={value}, "
            f"bounds [{lam + math.log(kappa)}, {lam}]"
        )


# ---------------------------------------------------------------------------
# periodic direction vectors (cyclic power iteration)
# ---------------------------------------------------------------------------


def _periodic_directions(phis: np.ndarray, tol: float = 1e-14, max_iter: int = 100_000):
    """(mu, nu) arrays of shape (period, d): mu[k] enters factor k from the
    left, nu[k] is the direction of Phi_k Phi_{k+1} ... 1."""
    per, d, _ = phis.shape
    mu = np.full((per, d), 1.0 / d)
    for _ in range(max_iter):
        prev = mu.copy()
        v = mu[0]
        for k in range(per):
            mu[k] = v
            v = v @ phis[k]
            v = v / v.sum()
        mu[0] = v  # direction after a full cycle feeds the next one
        if np.abs(mu - prev).max() <= tol:
            break
    else:
        raise ConvergenceError(float(np.abs(mu - prev).max()), max_iter)

    nu = np.full((per, d), 1.0 / d)
    for _ in range(max_iter):
        prev = nu.copy()
        v = nu[0]
        for k in range(per - 1, -1, -1):
            w = phis[k] @ v
            v = w / w.sum()
            nu[k] = v
        if np.abs(nu - prev).max() <= tol:
            break
    else:
        raise ConvergenceError(float(np.abs(nu - prev).max()), max_iter)
    return mu, nu


# ---------------------------------------------------------------------------
# evaluator: shared window and kernel caches across lambda sweeps
# ---------------------------------------------------------------------------


class LmgfEvaluator:
    """Evaluates Lambda, Lambda' and their truncated versions for one spec.

    i.i.d. specs get one window sampled at construction (levels
    [-margin, n_levels)); every lambda is evaluated on that same window, so
    sweeps and finite differences see a common realization.
    """

    def __init__(
        self,
        spec: EnvironmentSpec,
        n_levels: int = 3000,
        seed: int | None = 0,
        margin: int = DEFAULT_MARGIN,
        tol: float = 1e-12,
    ):
        self.spec = spec
        self.n_levels = n_levels
        self.seed = seed
        self.tol = tol
        self.margin = margin if spec.kind != "periodic" else 0
        self.window: EnvironmentWindow | None = None
        self._kernel_cache: dict[int, np.ndarray] = {}
        if spec.kind != "periodic":
            self.window = sample_window(spec, -margin, n_levels, seed=seed)

    # -- full ---------------------------------------------------------------

    def value(self, lam: float) -> LmgfEstimate:
        try:
            if self.spec.kind == "periodic":
                est = self._value_periodic(lam)
            else:
                est = self._value_window(lam)
        except (SupercriticalError, ConvergenceError):
            # lambda <= 0 is feasible a priori, so a failure there is a
            # convergence breakdown (recurrent boundary), not supercriticality
            return LmgfEstimate(
                lam=lam, value=float("inf"), deterministic_error=float("inf"),
                statistical_error=0.0, n=self.n_levels, supercritical=lam > 0,
            )
        _sandwich_check(lam, est.value, self.spec.kappa,
                        slack=1e-10 + 4 * est.statistical_error)
        return est

    def _value_periodic(self, lam: float) -> LmgfEstimate:
        # for lam <= 0 the iteration is monotone and bounded a priori, so a
        # max_iter exhaustion still yields a usable value with its tail bias
        # (polynomially slow convergence happens only at the recurrent boundary)
        pp = solve_phi_periodic(self.spec, lam, tol=FP_TOL,
                                on_maxiter="return" if lam <= 0 else "raise")
        mu, _ = _periodic_directions(pp.phis)
        terms = [math.log(float(mu[k] @ pp.phis[k] @ np.ones(self.spec.d)))
                 for k in range(pp.period)]
        c = _measured_c(pp.phis)
        tail = pp.tail if math.isfinite(pp.tail) else pp.residual * self.n_levels
        bias = 2.0 * tail / c
        det = min(_paper_window_bound(c, self.n_levels),
                  _det_cap(self.spec.kappa, lam, self.spec.d)) + bias
        return LmgfEstimate(
            lam=lam, value=float(np.mean(terms)), deterministic_error=det,
            statistical_error=0.0, n=self.n_levels, boundary_bias=bias,
        )

    def _value_window(self, lam: float) -> LmgfEstimate:
        sol = solve_phi_window(self.window, lam, tol=self.tol,
                               shift=self.margin or None, kappa=self.spec.kappa)
        i0 = self.window.index_of(0)
        n = self.n_levels
        d = self.window.d
        if d == 1:
            terms = np.log(sol.phis[i0:, 0, 0])
        else:
            terms = np.empty(n)
            z = np.full(d, 1.0 / d)
            ones = np.ones(d)
            for k in range(n):
                w = z @ sol.phis[i0 + k]
                s = float(w @ ones)
                terms[k] = math.log(s)
                z = w / s
        c = _measured_c(sol.phis[i0:])
        bias = self._boundary_bias(sol, i0, c)
        det = min(_paper_window_bound(c, n),
                  _det_cap(self.spec.kappa, lam, d)) + bias
        stat = 1.96 * float(terms.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
        return LmgfEstimate(
            lam=lam, value=float(terms.mean()), deterministic_error=det,
            statistical_error=stat, n=n, boundary_bias=bias,
        )

    def _boundary_bias(self, sol, i0: int, c: float) -> float:
        if sol.boundary_gap is None:
            return 0.0
        gaps = sol.boundary_gap[i0:]
        gaps = gaps[np.isfinite(gaps)]
        if gaps.size == 0:
            return 0.0
        return 2.0 * float(gaps.sum()) / (c * len(gaps))

    # -- derivative -----------------------------------------------------------

    def derivative(self, lam: float) -> LmgfEstimate:
        try:
            if self.spec.kind == "periodic":
                return self._derivative_periodic(lam)
            return self._derivative_window(lam)
        except (SupercriticalError, ConvergenceError):
            return LmgfEstimate(
                lam=lam, value=float("inf"), deterministic_error=float("inf"),
                statistical_error=0.0, n=self.n_levels, kind="derivative",
                supercritical=lam > 0,
            )

    def _derivative_periodic(self, lam: float) -> LmgfEstimate:
        pp = solve_phi_periodic(self.spec, lam, tol=FP_TOL)
        dph = periodic_phi_derivative(self.spec, lam, pp, tol=FP_TOL)
        mu, nu = _periodic_directions(pp.phis)
        per = pp.period
        terms = []
        for k in range(per):
            nxt = nu[(k + 1) % per]
            terms.append(float(mu[k] @ dph[k] @ nxt) / float(mu[k] @ pp.phis[k] @ nxt))
        c = _measured_c(pp.phis)
        return LmgfEstimate(
            lam=lam, value=float(np.mean(terms)),
            deterministic_error=_paper_window_bound(c, self.n_levels),
            statistical_error=0.0, n=self.n_levels, kind="derivative",
        )

    def _derivative_window(self, lam: float) -> LmgfEstimate:
        sol = solve_phi_window(self.window, lam, tol=self.tol,
                               shift=self.margin or None, kappa=self.spec.kappa)
        dsol = phi_derivative(self.window, lam, tol=self.tol, phi_solution=sol,
                              kappa=self.spec.kappa)
        i0 = self.window.index_of(0)
        n, d = self.n_levels, self.window.d

        if d == 1:
            terms = dsol.phis[i0:, 0, 0] / sol.phis[i0:, 0, 0]
        else:
            # right vectors rolled from the all-ones direction at level n, so
            # the sum is the exact lambda-derivative of the value estimator
            R = np.empty((n + 1, d))
            R[n] = 1.0 / d
            for k in range(n - 1, -1, -1):
                w = sol.phis[i0 + k] @ R[k + 1]
                R[k] = w / w.sum()
            terms = np.empty(n)
            z = np.full(d, 1.0 / d)
            for k in range(n):
                phi_k = sol.phis[i0 + k]
                terms[k] = float(z @ dsol.phis[i0 + k] @ R[k + 1]) / float(z @ phi_k @ R[k + 1])
                w = z @ phi_k
                z = w / w.sum()
        c = _measured_c(sol.phis[i0:])
        det = _paper_window_bound(c, n) * (1.0 + abs(float(terms.mean())))
        stat = 1.96 * float(terms.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
        return LmgfEstimate(
            lam=lam, value=float(terms.mean()), deterministic_error=det,
            statistical_error=stat, n=n, kind="derivative",
        )

    # -- truncated ------------------------------------------------------------

    def _kernels(self, M: int) -> np.ndarray:
        if M not in self._kernel_cache:
            if self.spec.kind == "periodic":
                self._kernel_cache[M] = periodic_truncated_kernels(self.spec, M)
            else:
                if self.window.lo > -M:
                    raise ValueError("window margin too small for truncation depth M")
                ker = np.empty((self.n_levels, M, self.spec.d, self.spec.d))
                for k in range(self.n_levels):
                    ker[k] = hitting_kernels(self.window, k, M)
                self._kernel_cache[M] = ker
        return self._kernel_cache[M]

    def _check_truncation_depth(self, phis: np.ndarray, M: int) -> None:
        # M >= N_kappa guarantees positive truncated matrices; rather than a
        # hard depth gate (which would reject the perfectly well defined d=1,
        # M=1 case) the positivity itself is enforced
        if (phis <= 0).any() and self.spec.bounded_jump is None:
            raise ValueError(
                f"M={M} too small: truncated matrices lose strict positivity "
                f"(M >= N_kappa = {n_kappa(self.spec.kappa)} guarantees it)"
            )

    def value_truncated(self, lam: float, M: int) -> LmgfEstimate:
        ker = self._kernels(M)
        nlev, d = ker.shape[0], self.spec.d
        _check_truncated_range(lam, M)
        m = np.arange(1, M + 1)
        phis = np.einsum("m,kmij->kij", np.exp(lam * m), ker)
        self._check_truncation_depth(phis, M)
        if self.spec.kind == "periodic":
            mu, _ = _periodic_directions(phis)
            terms = [math.log(float(mu[k] @ phis[k] @ np.ones(d))) for k in range(nlev)]
            stat = 0.0
            n = self.n_levels
        elif d == 1:
            terms = np.log(phis[:, 0, 0])
            stat = 1.96 * float(np.std(terms, ddof=1)) / math.sqrt(nlev)
            n = nlev
        else:
            terms = np.empty(nlev)
            z = np.full(d, 1.0 / d)
            for k in range(nlev):
                w = z @ phis[k]
                s = w.sum()
                terms[k] = math.log(s)
                z = w / s
            stat = 1.96 * float(np.std(terms, ddof=1)) / math.sqrt(nlev)
            n = nlev
        c = _measured_c(phis)
        return LmgfEstimate(
            lam=lam, value=float(np.mean(terms)),
            deterministic_error=_paper_window_bound(c, n),
            statistical_error=stat, n=n, kind="truncated", M=M,
        )

    def derivative_truncated(self, lam: float, M: int) -> LmgfEstimate:
        ker = self._kernels(M)
        nlev, d = ker.shape[0], self.spec.d
        _check_truncated_range(lam, M)
        m = np.arange(1, M + 1)
        e = np.exp(lam * m)
        phis = np.einsum("m,kmij->kij", e, ker)
        dphis = np.einsum("m,kmij->kij", m * e, ker)
        self._check_truncation_depth(phis, M)
        if self.spec.kind == "periodic":
            mu, nu = _periodic_directions(phis)
            terms = [
                float(mu[k] @ dphis[k] @ nu[(k + 1) % nlev])
                / float(mu[k] @ phis[k] @ nu[(k + 1) % nlev])
                for k in range(nlev)
            ]
            stat = 0.0
        elif d == 1:
            terms = dphis[:, 0, 0] / phis[:, 0, 0]
            stat = 1.96 * float(np.std(terms, ddof=1)) / math.sqrt(nlev)
        else:
            R = np.empty((nlev + 1, d))
            R[nlev] = 1.0 / d
            for k in range(nlev - 1, -1, -1):
                w = phis[k] @ R[k + 1]
                R[k] = w / w.sum()
            terms = np.empty(nlev)
            z = np.full(d, 1.0 / d)
            for k in range(nlev):
                terms[k] = float(z @ dphis[k] @ R[k + 1]) / float(z @ phis[k] @ R[k + 1])
                w = z @ phis[k]
                z = w / w.sum()
            stat = 1.96 * float(np.std(terms, ddof=1)) / math.sqrt(nlev)
        c = _measured_c(phis)
        return LmgfEstimate(
            lam=lam, value=float(np.mean(terms)),
            deterministic_error=_paper_window_bound(c, self.n_levels),
            statistical_error=stat, n=self.n_levels, kind="truncated-derivative", M=M,
        )

    def solve_tilt(self, t: float, M: int, tol: float = 1e-9) -> float:
        """lambda_{t,M}: the root of Lambda'_M(lambda) = t (exists for 1 < t < M-2)."""
        if not 1.0 < t < M - 2:
            raise ValueError(f"need 1 < t < M-2 (t={t}, M={M})")
        lo, hi = -2.0, 2.0
        while self.derivative_truncated(lo, M).value > t:
            lo *= 2.0
            if lo < -700:
                raise ConvergenceError(float("nan"), 0)
        while self.derivative_truncated(hi, M).value < t:
            hi *= 2.0
            if hi > 700:
                raise ConvergenceError(float("nan"), 0)
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self.derivative_truncated(mid, M).value < t:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def lambda_eta(
    spec: EnvironmentSpec, lam: float, n_levels: int = 3000,
    seed: int | None = 0, margin: int = DEFAULT_MARGIN,
) -> LmgfEstimate:
    return LmgfEvaluator(spec, n_levels, seed, margin).value(lam)


def lambda_eta_prime(
    spec: EnvironmentSpec, lam: float, n_levels: int = 3000,
    seed: int | None = 0, margin: int = DEFAULT_MARGIN,
) -> LmgfEstimate:
    return LmgfEvaluator(spec, n_levels, seed, margin).derivative(lam)


def lambda_eta_truncated(
    spec: EnvironmentSpec, lam: float, M: int, n_levels: int = 3000,
    seed: int | None = 0,
) -> LmgfEstimate:
    return LmgfEvaluator(spec, n_levels, seed, margin=max(M, DEFAULT_MARGIN)).value_truncated(lam, M)


@dataclass(frozen=True)
class EnvironmentAnalysis:
    t0: float
    t_star: float
    v0: float
    lambda_crit: CriticalExponent
    regime: str  # transient-right | recurrent | transient-left
    ambiguous: bool = False
    lambda_at_zero: float = 0.0
    spec_hash: str = ""

    def as_dict(self) -> dict:
        return {
            "t0": self.t0,
            "t_star": self.t_star,
            "v0": self.v0,
            "lambda_crit": list(self.lambda_crit.bracket),
            "regime": self.regime,
            "ambiguous": self.ambiguous,
            "lambda_at_zero": self.lambda_at_zero,
            "spec_hash": self.spec_hash,
        }


def analyze_environment(
    spec: EnvironmentSpec,
    n_levels: int = 3000,
    seed: int | None = 0,
    tol: float = 1e-8,
    lambda_crit_tol: float = 1e-6,
    lambda_crit_window: int = 6000,
) -> EnvironmentAnalysis:
    """Regime, LLN constants and critical exponent of a spec.

    Regime detection: Lambda(0) < 0 means transient-left (the walk fails to
    hit the next level with positive probability); otherwise the reflected
    spec decides between transient-right and recurrent. Thresholds widen by
    the measured boundary-forgetting bias so slowly-mixing (near-recurrent)
    windows are reported recurrent-with-flag rather than misclassified.
    """
    ev = LmgfEvaluator(spec, n_levels, seed)
    ev_inv = LmgfEvaluator(spec.invert(), n_levels, seed)

    at0 = ev.value(0.0)
    at0_inv = ev_inv.value(0.0)
    # the measured boundary bias widens the decision floor so that slowly
    # forgetting (near-recurrent) windows are not misread as transient-left
    floor = max(tol, 3 * at0.statistical_error, 20 * at0.boundary_bias)
    floor_inv = max(tol, 3 * at0_inv.statistical_error, 20 * at0_inv.boundary_bias)

    if at0.value < -floor:
        regime = "transient-left"
    elif at0_inv.value < -floor_inv:
        regime = "transient-right"
    else:
        regime = "recurrent"
    ambiguous = regime == "recurrent" and (
        abs(at0.value) > tol or abs(at0_inv.value) > tol
    )

    lc = estimate_lambda_crit(
        spec, window_len=lambda_crit_window, tol=lambda_crit_tol, seed=seed
    )

    if regime == "recurrent":
        t0 = float("inf")
        v0 = 0.0
    else:
        fwd = ev if regime == "transient-right" else ev_inv
        d1 = fwd.derivative(-1e-6).value
        d2 = fwd.derivative(-1e-4).value
        stable = abs(d1 - d2) <= 0.05 * max(abs(d1), 1.0)
        t0 = d1 if stable else float("inf")
        if regime == "transient-right":
            v0 = 1.0 / t0 if math.isfinite(t0) else 0.0
        else:
            v0 = -1.0 / t0 if math.isfinite(t0) else 0.0
            t0 = ev.derivative(-1e-6).value  # definitional limit on the spec itself

    lam_star = lc.bracket[0] - lambda_crit_tol
    if lam_star <= -1e-6:
        t_star = t0
    else:
        ts = ev.derivative(lam_star).value
        t_star = ts if ts <= 1.0 / lambda_crit_tol else float("inf")

    return EnvironmentAnalysis(
        t0=t0, t_star=t_star, v0=v0, lambda_crit=lc, regime=regime,
        ambiguous=ambiguous, lambda_at_zero=at0.value,
        spec_hash=spec.content_hash(),
    )
