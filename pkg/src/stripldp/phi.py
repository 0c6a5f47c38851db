"""Quenched excursion MGF matrices Phi_k(lambda) and relatives.

Phi_k(lambda)(i,j) = E^{(k,i)}[ e^{lambda * T_{k+1}} ; T_{k+1} < inf, Y_{T_{k+1}} = j ]
solves the one-step fixed point

    Phi_k = e^lambda ( p_k + r_k Phi_k + q_k Phi_{k-1} Phi_k ).

Given Phi_{k-1} the equation is linear in Phi_k, so a window is solved by a
single left-to-right pass of small linear solves starting from the zero
matrix at the left boundary (the minimal, probabilistic solution). Validity
of each solve is certified by an M-matrix check: for the nonnegative
M = e^lambda (r + q Phi_{k-1}), the Neumann series converges iff
(I - M)^{-1} >= 0 entrywise, and a failure (or an entry above the a-priori
bound (1/kappa) e^{-lambda} for lambda > 0) certifies supercriticality.

Truncated matrices Phi_{k,M} are computed exactly by a dynamic program over
time steps; the term-by-term derivatives Phi'_k come from the forward
sensitivity of the same fixed point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import (
    EnvironmentSpec,
    EnvironmentWindow,
    lambda_crit_cap,
    sample_window,
)

NEG_ENTRY_TOL = -1e-12  # roundoff slack for the M-matrix inverse positivity


class SupercriticalError(RuntimeError):
    """lambda exceeds the (estimated) critical exponent; Phi diverges."""

    def __init__(self, lam: float, level: int | None = None, detail: str = ""):
        self.lam = lam
        self.level = level
        super().__init__(
            f"Phi(lambda={lam}) diverges"
            + (f" at level {level}" if level is not None else "")
            + (f": {detail}" if detail else "")
        )


class ConvergenceError(RuntimeError):
    """Fixed-point iteration exhausted max_iter; carries the last residual."""

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"no convergence after {iterations} iterations, residual {residual:.3e}"
        )


@dataclass(frozen=True)
class PhiMatrix:
    """One level's MGF matrix: kind is 'full', 'truncated' or 'derivative'."""

    entries: np.ndarray
    level: int
    lam: float
    kind: str = "full"
    M: int | None = None
    warmup: bool = False


def divergence_bound(kappa: float, lam: float, tol: float = 1e-12) -> float:
    """Entry threshold whose crossing certifies lambda > lambda_crit.

    (1/kappa) e^{-lambda} bounds every true Phi entry for lambda in
    (0, lambda_crit]; window values only ever undershoot the true ones.
    For lambda <= 0 every entry is a subprobability, so 1 is the bound
    (tighter than 1/c_lambda and safe against c_lambda underflow).
    """
    if lam > 0:
        return (1.0 / kappa) * math.exp(-lam) * (1.0 + 10.0 * tol)
    return 1.0 + 10.0 * tol


def _sweep_d1(q, r, p, el: float, phi0: float, bound: float):
    """Scalar fast path ('q','r','p' are flat float lists)."""
    n = len(q)
    out = np.empty((n, 1, 1))
    f = phi0
    for k in range(n):
        m = el * (r[k] + q[k] * f)
        if m >= 1.0:
            return out, k
        f = el * p[k] / (1.0 - m)
        if f > bound:
            return out, k
        out[k, 0, 0] = f
    return out, -1


def _sweep_general(q, r, p, el: float, phi0: np.ndarray, bound: float):
    n, d, _ = q.shape
    out = np.empty((n, d, d))
    eye = np.eye(d)
    rhs = np.empty((d, 2 * d))
    f = phi0
    for k in range(n):
        m = el * (r[k] + q[k] @ f)
        rhs[:, :d] = el * p[k]
        rhs[:, d:] = eye
        try:
            sol = np.linalg.solve(eye - m, rhs)
        except np.linalg.LinAlgError:
            return out, k
        f = sol[:, :d]
        # inverse nonnegativity <=> spectral radius of m < 1 (M-matrix)
        if (sol[:, d:] < NEG_ENTRY_TOL).any() or (f < NEG_ENTRY_TOL).any():
            return out, k
        if f.max() > bound:
            return out, k
        np.maximum(f, 0.0, out=out[k])
        f = out[k]
    return out, -1


def _sweep(window: EnvironmentWindow, lam: float, phi0, bound: float):
    """One exact left-to-right pass; returns (phis, bad_level_index or -1)."""
    el = math.exp(lam)
    if window.d == 1:
        q = window.q[:, 0, 0].tolist()
        r = window.r[:, 0, 0].tolist()
        p = window.p[:, 0, 0].tolist()
        f0 = float(phi0[0, 0]) if isinstance(phi0, np.ndarray) else float(phi0)
        return _sweep_d1(q, r, p, el, f0, bound)
    f0 = phi0 if isinstance(phi0, np.ndarray) else np.full((window.d, window.d), phi0)
    return _sweep_general(window.q, window.r, window.p, el, f0, bound)


@dataclass
class PhiSolution:
    """Per-level Phi matrices over a window, with measured boundary forgetting.

    Levels before `warmup_levels` (relative to window.lo) still feel the zero
    initialization at the left edge; `boundary_gap` is the measured influence
    of the first `shift` levels at each position, a proxy certificate for the
    geometric forgetting of the left boundary.
    """

    window: EnvironmentWindow
    lam: float
    phis: np.ndarray  # (n, d, d)
    kind: str = "full"
    warmup_levels: int = 0
    boundary_gap: np.ndarray | None = None
    shift: int = 0

    def __len__(self) -> int:
        return self.phis.shape[0]

    def __getitem__(self, i: int) -> PhiMatrix:
        if i < 0:
            i += len(self)
        return PhiMatrix(
            entries=self.phis[i],
            level=self.window.lo + i,
            lam=self.lam,
            kind=self.kind,
            warmup=i < self.warmup_levels,
        )

    def at_level(self, level: int) -> np.ndarray:
        return self.phis[self.window.index_of(level)]

    def reliable_from(self) -> int:
        """First level (absolute) past the measured warm-up."""
        return self.window.lo + self.warmup_levels


def solve_phi_window(
    window: EnvironmentWindow,
    lam: float,
    tol: float = 1e-12,
    max_iter: int = 0,
    shift: int | None = None,
    kappa: float | None = None,
) -> PhiSolution:
    """Solve the Phi fixed point over the window from the zero left boundary.

    The pass is the exact limit of the monotone sweep iteration (each level's
    equation is linear given its left neighbor), so `max_iter` is unused here;
    it is kept for signature parity with the periodic solver. Boundary
    forgetting is measured by re-solving from `shift` levels in and flagging
    as warm-up every level where the two solutions differ by more than tol.
    `kappa` is the spec's ellipticity constant (measured from the window's
    entry-height conditions when omitted); it calibrates the a-priori
    divergence threshold certifying supercriticality.
    """
    n = window.n_levels
    kappa_bound = _window_bound(window, lam, tol, kappa)
    phi0 = np.zeros((window.d, window.d))
    phis, bad = _sweep(window, lam, phi0, kappa_bound)
    if bad >= 0:
        raise SupercriticalError(lam, level=window.lo + bad)

    if shift is None:
        shift = min(max(n // 4, 1), 256)
    gap = np.full(n, np.nan)
    warmup = shift
    if shift < n:
        sub = window.sub(window.lo + shift, window.hi)
        phis2, bad2 = _sweep(sub, lam, phi0, kappa_bound)
        if bad2 >= 0:
            raise SupercriticalError(lam, level=sub.lo + bad2)
        diffs = np.abs(phis[shift:] - phis2).max(axis=(1, 2))
        gap[shift:] = diffs
        above = np.nonzero(diffs > 0.5 * tol)[0]
        warmup = n if above.size and (shift + above[-1] + 1 >= n) else (
            shift + above[-1] + 1 if above.size else shift
        )
    return PhiSolution(
        window=window, lam=lam, phis=phis,
        warmup_levels=warmup, boundary_gap=gap, shift=shift,
    )


def _window_bound(window: EnvironmentWindow, lam: float, tol: float,
                  kappa: float | None = None) -> float:
    if kappa is None:
        kappa = _infer_kappa(window)
    return divergence_bound(kappa, lam, tol)


def _infer_kappa(window: EnvironmentWindow) -> float:
    """Largest ellipticity level the window certifiably supports.

    The a-priori entry bound (1/kappa) e^{-lambda} is derived from the
    entry-height conditions ((I-r)^{-1} q)(i,j) >= kappa (and mirrored for p),
    so kappa must be measured from those, not from one-step sums. Capped
    below 1/2 to stay inside N_kappa's domain.
    """
    d = window.d
    eye = np.eye(d)
    worst = 0.499
    for k in range(window.n_levels):
        try:
            sol = np.linalg.solve(eye - window.r[k],
                                  np.concatenate([window.q[k], window.p[k]], axis=1))
        except np.linalg.LinAlgError:
            return 1e-9
        worst = min(worst, float(sol.min()))
    return max(worst, 1e-9)


def residual_norm(solution: PhiSolution) -> float:
    """Max-norm defect of the fixed-point equation over all levels."""
    w, el = solution.window, math.exp(solution.lam)
    prev = np.zeros((w.d, w.d))
    worst = 0.0
    for k in range(len(solution)):
        cur = solution.phis[k]
        rhs = el * (w.p[k] + w.r[k] @ cur + w.q[k] @ prev @ cur)
        worst = max(worst, float(np.abs(cur - rhs).max()))
        prev = cur
    return worst


# ---------------------------------------------------------------------------
# periodic environments: cyclic fixed point
# ---------------------------------------------------------------------------


@dataclass
class PeriodicPhi:
    """Phi values for one period of a periodic spec (position k = level k mod period).

    `tail` is a Richardson estimate of the remaining distance to the fixed
    point, extrapolated from the last two sweep-to-sweep changes; it stays
    meaningful even for the polynomially slow recurrent boundary case.
    """

    phis: np.ndarray  # (period, d, d)
    lam: float
    iterations: int
    residual: float
    tail: float = 0.0

    @property
    def period(self) -> int:
        return self.phis.shape[0]


def _tail_estimate(change: float, prev_change: float) -> float:
    if change <= 0.0:
        return 0.0
    if prev_change <= 0.0 or change >= prev_change:
        return float("inf")
    ratio = change / prev_change
    return change * ratio / (1.0 - ratio)


def solve_phi_periodic(
    spec: EnvironmentSpec,
    lam: float,
    tol: float = 1e-13,
    max_iter: int = 200_000,
    on_maxiter: str = "raise",
) -> PeriodicPhi:
    """Iterate the cyclic sweep (position 0 fed by position period-1) to tol.

    Monotone from the zero start, so the limit is the minimal fixed point,
    equal to the bi-infinite Phi of the periodic environment. With
    on_maxiter='return' a still-converging (monotone, bounded) iteration is
    returned at max_iter with its extrapolated tail instead of raising; only
    safe for lambda <= 0 where feasibility is a priori.
    """
    if spec.kind != "periodic":
        raise ValueError("solve_phi_periodic needs a periodic spec")
    bound = divergence_bound(spec.kappa, lam, tol)
    el = math.exp(lam)
    per, d = spec.period, spec.d
    prev_change = change_before = float("inf")

    if d == 1:
        q = [float(s.q[0, 0]) for s in spec.slices]
        r = [float(s.r[0, 0]) for s in spec.slices]
        p = [float(s.p[0, 0]) for s in spec.slices]
        f = [0.0] * per
        prev_tail = 0.0
        for it in range(1, max_iter + 1):
            change = 0.0
            carry = prev_tail
            for k in range(per):
                m = el * (r[k] + q[k] * carry)
                if m >= 1.0:
                    raise SupercriticalError(lam, level=k)
                new = el * p[k] / (1.0 - m)
                if new > bound:
                    raise SupercriticalError(lam, level=k)
                delta = new - f[k]
                if delta > change:
                    change = delta
                f[k] = new
                carry = new
            prev_tail = f[-1]
            if change <= tol:
                return PeriodicPhi(
                    phis=np.asarray(f).reshape(per, 1, 1), lam=lam,
                    iterations=it, residual=change,
                    tail=_tail_estimate(change, prev_change),
                )
            prev_change, change_before = change, prev_change
        if on_maxiter == "return":
            return PeriodicPhi(
                phis=np.asarray(f).reshape(per, 1, 1), lam=lam,
                iterations=max_iter, residual=change,
                tail=_tail_estimate(prev_change, change_before),
            )
        raise ConvergenceError(change, max_iter)

    eye = np.eye(d)
    rhs = np.empty((d, 2 * d))
    f = np.zeros((per, d, d))
    for it in range(1, max_iter + 1):
        change = 0.0
        carry = f[-1]
        for k in range(per):
            s = spec.slices[k]
            m = el * (s.r + s.q @ carry)
            rhs[:, :d] = el * s.p
            rhs[:, d:] = eye
            try:
                sol = np.linalg.solve(eye - m, rhs)
            except np.linalg.LinAlgError:
                raise SupercriticalError(lam, level=k)
            new = sol[:, :d]
            if (sol[:, d:] < NEG_ENTRY_TOL).any() or (new < NEG_ENTRY_TOL).any():
                raise SupercriticalError(lam, level=k)
            if new.max() > bound:
                raise SupercriticalError(lam, level=k)
            change = max(change, float(np.abs(new - f[k]).max()))
            f[k] = np.maximum(new, 0.0)
            carry = f[k]
        if change <= tol:
            return PeriodicPhi(phis=f, lam=lam, iterations=it, residual=change,
                               tail=_tail_estimate(change, prev_change))
        prev_change, change_before = change, prev_change
    if on_maxiter == "return":
        return PeriodicPhi(phis=f, lam=lam, iterations=max_iter, residual=change,
                           tail=_tail_estimate(prev_change, change_before))
    raise ConvergenceError(change, max_iter)


# ---------------------------------------------------------------------------
# term-by-term derivative Phi'_k (forward sensitivity of the fixed point)
# ---------------------------------------------------------------------------


def _derivative_sweep(window, lam, phis, dphi0):
    el = math.exp(lam)
    n, d = window.n_levels, window.d
    eye = np.eye(d)
    out = np.empty((n, d, d))
    prev_phi = np.zeros((d, d))
    prev_d = dphi0
    for k in range(n):
        cur = phis[k]
        m = el * (window.r[k] + window.q[k] @ prev_phi)
        rhs = cur + el * (window.q[k] @ prev_d @ cur)
        out[k] = np.linalg.solve(eye - m, rhs)
        prev_phi, prev_d = cur, out[k]
    return out


def phi_derivative(
    window: EnvironmentWindow,
    lam: float,
    tol: float = 1e-12,
    phi_solution: PhiSolution | None = None,
    kappa: float | None = None,
) -> PhiSolution:
    """Exact lambda-derivative of the window-solved Phi matrices.

    Differentiating Phi_k = (I - e^l (r + q Phi_{k-1}))^{-1} e^l p with the
    zero boundary gives the linear recursion

        (I - e^l (r_k + q_k Phi_{k-1})) Phi'_k = Phi_k + e^l q_k Phi'_{k-1} Phi_k,

    solved left to right with Phi'_{lo-1} = 0. Verified elsewhere against
    central finite differences of the Phi solve.
    """
    if phi_solution is None:
        phi_solution = solve_phi_window(window, lam, tol=tol, kappa=kappa)
    dphis = _derivative_sweep(window, lam, phi_solution.phis, np.zeros((window.d, window.d)))
    n = window.n_levels
    shift = phi_solution.shift
    gap = np.full(n, np.nan)
    warmup = phi_solution.warmup_levels
    if 0 < shift < n:
        sub = window.sub(window.lo + shift, window.hi)
        phis2, bad = _sweep(sub, lam, np.zeros((window.d, window.d)),
                            _window_bound(window, lam, tol, kappa))
        if bad >= 0:
            raise SupercriticalError(lam, level=sub.lo + bad)
        dphis2 = _derivative_sweep(sub, lam, phis2, np.zeros((window.d, window.d)))
        diffs = np.abs(dphis[shift:] - dphis2).max(axis=(1, 2))
        gap[shift:] = diffs
        above = np.nonzero(diffs > 0.5 * max(tol, 1e-11) * max(1.0, np.abs(dphis).max()))[0]
        if above.size:
            warmup = max(warmup, min(n, shift + above[-1] + 1))
    return PhiSolution(
        window=window, lam=lam, phis=dphis, kind="derivative",
        warmup_levels=warmup, boundary_gap=gap, shift=shift,
    )


def periodic_phi_derivative(
    spec: EnvironmentSpec,
    lam: float,
    periodic: PeriodicPhi,
    tol: float = 1e-13,
    max_iter: int = 200_000,
) -> np.ndarray:
    """Cyclic analogue of phi_derivative; returns (period, d, d)."""
    el = math.exp(lam)
    per, d = periodic.period, spec.d
    eye = np.eye(d)
    dph = np.zeros((per, d, d))
    for it in range(max_iter):
        change = 0.0
        carry_phi = periodic.phis[-1]
        carry_d = dph[-1]
        for k in range(per):
            s = spec.slices[k]
            cur = periodic.phis[k]
            m = el * (s.r + s.q @ carry_phi)
            rhs = cur + el * (s.q @ carry_d @ cur)
            new = np.linalg.solve(eye - m, rhs)
            change = max(change, float(np.abs(new - dph[k]).max()))
            dph[k] = new
            carry_phi, carry_d = cur, new
        if change <= tol * max(1.0, float(np.abs(dph).max())):
            return dph
    raise ConvergenceError(change, max_iter)


# ---------------------------------------------------------------------------
# truncated MGFs Phi_{k,M} via exact dynamic programming
# ---------------------------------------------------------------------------


def hitting_kernels(window: EnvironmentWindow, k: int, M: int) -> np.ndarray:
    """W[m-1](i,j) = P^{(k,i)}( T_{k+1} = m, Y_{T_{k+1}} = j ) for m = 1..M.

    Exact DP on levels (k-M, k] with absorption at level k+1; levels below
    k-M are unreachable before time M. Requires the window to cover (k-M, k].
    """
    if M < 1:
        raise ValueError("need M >= 1")
    d = window.d
    if not (window.lo <= k - M + 1 and k < window.hi):
        raise ValueError(
            f"window [{window.lo},{window.hi}) must cover levels ({k - M}, {k}]"
        )
    base = window.index_of(k - M + 1)
    q = window.q[base:base + M]
    r = window.r[base:base + M]
    p = window.p[base:base + M]

    # cur[l, i, j]: mass of paths from (k, i) now at level k-M+1+l, height j
    cur = np.zeros((M, d, d))
    cur[M - 1] = np.eye(d)
    W = np.zeros((M, d, d))
    for m in range(1, M + 1):
        W[m - 1] = cur[M - 1] @ p[M - 1]
        if m == M:
            break
        nxt = np.zeros_like(cur)
        for l in range(M):
            block = cur[l]
            if not block.any():
                continue
            nxt[l] += block @ r[l]
            if l > 0:
                nxt[l - 1] += block @ q[l]
            if l + 1 < M:
                nxt[l + 1] += block @ p[l]
        cur = nxt
    return W


TRUNCATED_EXP_CAP = 400.0  # linear-domain DP refuses e^{lam*M} beyond this exponent


def _check_truncated_range(lam: float, M: int) -> None:
    # exactness beats range: the DP stays in linear doubles, so weights
    # e^{lam m} with lam*M past ~400 are refused rather than overflowed
    if lam > 0 and lam * M > TRUNCATED_EXP_CAP:
        raise ValueError(
            f"truncated evaluation refuses lambda*M = {lam * M:.0f} > "
            f"{TRUNCATED_EXP_CAP:.0f}: the linear-domain DP would overflow"
        )


def kernels_to_phi(W: np.ndarray, lam: float) -> np.ndarray:
    _check_truncated_range(lam, W.shape[0])
    m = np.arange(1, W.shape[0] + 1)
    return np.einsum("m,mij->ij", np.exp(lam * m), W)


def kernels_to_phi_and_derivative(W: np.ndarray, lam: float):
    m = np.arange(1, W.shape[0] + 1)
    e = np.exp(lam * m)
    return (
        np.einsum("m,mij->ij", e, W),
        np.einsum("m,mij->ij", m * e, W),
    )


def phi_truncated(window: EnvironmentWindow, lam: float, M: int, k: int) -> PhiMatrix:
    """Exact Phi_{k,M}(lambda); finite for every real lambda."""
    W = hitting_kernels(window, k, M)
    return PhiMatrix(
        entries=kernels_to_phi(W, lam), level=k, lam=lam, kind="truncated", M=M
    )


def truncated_kernels_range(
    window: EnvironmentWindow, M: int, k0: int, k1: int
) -> np.ndarray:
    """Stacked hitting kernels for levels k0..k1-1; shape (k1-k0, M, d, d)."""
    d = window.d
    out = np.empty((k1 - k0, M, d, d))
    for k in range(k0, k1):
        out[k - k0] = hitting_kernels(window, k, M)
    return out


def periodic_truncated_kernels(spec: EnvironmentSpec, M: int) -> np.ndarray:
    """Hitting kernels for one period of a periodic spec; shape (period, M, d, d)."""
    per = spec.period
    window = sample_window(spec, -M, per)
    return truncated_kernels_range(window, M, 0, per)


# ---------------------------------------------------------------------------
# critical exponent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CriticalExponent:
    lambda_crit: float
    bracket: tuple[float, float]
    tolerance: float

    def __post_init__(self):
        lo, hi = self.bracket
        if not (lo <= self.lambda_crit <= hi):
            raise ValueError("lambda_crit must lie inside its bracket")


def estimate_lambda_crit(
    spec: EnvironmentSpec,
    window_len: int = 6000,
    tol: float = 1e-6,
    seed: int | None = 0,
    max_iter: int = 200_000,
) -> CriticalExponent:
    """Bisect [0, -log(kappa^2/2)] on Phi-solver feasibility.

    lambda = 0 is feasible a priori (entries of Phi(0) are probabilities).
    A window solve that diverges, exceeds the a-priori entry bound, or fails
    to converge counts as infeasible, shrinking the verdict conservatively.
    """
    cap = lambda_crit_cap(spec.kappa)
    if spec.kind == "periodic":
        def feasible(lam: float) -> bool:
            try:
                solve_phi_periodic(spec, lam, tol=min(1e-13, tol * 1e-4),
                                   max_iter=max_iter)
                return True
            except (SupercriticalError, ConvergenceError):
                return False
    else:
        window = sample_window(spec, 0, window_len, seed=seed)
        phi0 = np.zeros((spec.d, spec.d))

        def feasible(lam: float) -> bool:
            bound = divergence_bound(spec.kappa, lam)
            _, bad = _sweep(window, lam, phi0, bound)
            return bad < 0

    lo, hi = 0.0, cap
    if feasible(hi):
        # cannot happen for kappa < 1/2 unless degenerate; report the cap
        return CriticalExponent(lambda_crit=hi, bracket=(hi - tol, hi), tolerance=tol)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return CriticalExponent(lambda_crit=0.5 * (lo + hi), bracket=(lo, hi), tolerance=tol)
