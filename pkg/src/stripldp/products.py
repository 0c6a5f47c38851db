"""Normalized products of Phi matrices: direction vectors with certificates.

Left vectors mu_n(lambda) are the limiting directions of pi Phi_m ... Phi_{n-1}
as m -> -infinity; right vectors nu_k(lambda) the limiting directions of
Phi_k ... Phi_m 1 as m -> +infinity. Products of matrices with entries in
[c, 1/c] contract directions geometrically; the per-step contraction
coefficient is measured from the actual factors

    rho(A, B) = min_{i,j,k} A(i,j) B(j,k) / (A B)(i,k)

(adjacent factors, earlier one on the left) and certified via
||eps_m|| <= prod (1 - d rho), giving an l1 (mu) / l-infinity (nu) radius
2 eps / (1 - eps). The measured radius is never looser than the closed form
(2/c^4)(1-c^4)^(m-1) with c the measured entrywise bound.

Appendix-style environments from (L, R) embeddings with L > R have Phi with
zero columns [R+1, L]; those are handled by block reduction on the positive
R x R upper-left blocks, never by the positive-product routines directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phi import PhiMatrix, PhiSolution


class NonPositiveFactorError(ValueError):
    """A product factor has a nonpositive entry; route through block reduction."""


@dataclass(frozen=True)
class DirectionVector:
    """Probability vector on heights with a certified distance to the limit.

    side 'left' -> mu (l1 radius), side 'right' -> nu (l-infinity radius);
    kind 'truncated' marks vectors built from Phi_{k,M} factors.
    """

    v: np.ndarray
    level: int
    lam: float
    side: str
    error_radius: float
    kind: str = "full"
    M: int | None = None
    warmup: bool = False
    factors_consumed: int = 0

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim != 1 or (v < -1e-15).any() or abs(v.sum() - 1.0) > 1e-12:
            raise ValueError("direction vector must be a probability vector")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class BlockPhi:
    """Positive blocks of a zero-column Phi: A is R x R, B is (L-R) x R."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        if self.A.shape[0] != self.A.shape[1] or self.B.shape[1] != self.A.shape[1]:
            raise ValueError("A must be R x R and B (L-R) x R")
        if (self.A <= 0).any() or (self.B.size and (self.B <= 0).any()):
            raise ValueError("block entries must be strictly positive")

    @property
    def zero_columns(self) -> int:
        return self.B.shape[0]

    @classmethod
    def from_full(cls, phi: np.ndarray, R: int) -> "BlockPhi":
        d = phi.shape[0]
        if R < 1 or R >= d:
            raise ValueError("need 1 <= R < d for block reduction")
        if phi[:, R:].any():
            raise ValueError("columns beyond R must be exactly zero")
        return cls(A=phi[:R, :R].copy(), B=phi[R:, :R].copy())


def _factor_stack(phis) -> tuple[np.ndarray, int, float, str, int | None]:
    """Coerce a PhiSolution or a sequence of PhiMatrix to (array, lo, lam, kind, M)."""
    if isinstance(phis, PhiSolution):
        return phis.phis, phis.window.lo, phis.lam, phis.kind, None
    mats = list(phis)
    if not mats:
        raise ValueError("need at least one factor")
    if isinstance(mats[0], PhiMatrix):
        arr = np.stack([m.entries for m in mats])
        return arr, mats[0].level, mats[0].lam, mats[0].kind, mats[0].M
    arr = np.stack([np.asarray(m, dtype=float) for m in mats])
    return arr, 0, float("nan"), "full", None


def rho_pair(A: np.ndarray, B: np.ndarray) -> float:
    """Contraction coefficient of the ordered product A B (A applied first)."""
    terms = A[:, :, None] * B[None, :, :]  # (i, j, k)
    prod = terms.sum(axis=1)
    return float((terms.min(axis=1) / prod).min())


def _radius_from_eps(eps: float) -> float:
    if eps >= 1.0:
        return float("inf")
    return 2.0 * eps / (1.0 - eps)


def measured_c(factors: np.ndarray) -> float:
    """Largest c with c <= entries <= 1/c over all factors."""
    lo = float(factors.min())
    hi = float(factors.max())
    if lo <= 0:
        raise NonPositiveFactorError("factors must have strictly positive entries")
    return min(lo, 1.0 / hi)


def closed_form_radius(c: float, m: int) -> float:
    """(2/c^4)(1-c^4)^(m-1): the certificate with the measured uniform bound c."""
    return 2.0 / c**4 * (1.0 - c**4) ** (m - 1)


def positive_product_direction(factors, side: str = "left") -> DirectionVector:
    """Limiting direction of the normalized product of positive matrices.

    side 'left': lim pi G_1 G_2 ... G_m / (.. 1), independent of pi (computed
    from the uniform start, renormalized after every factor). side 'right'
    operates on transposes, consuming factors newest-first. The certificate
    is the running product of measured per-step contraction coefficients.
    """
    arr, lo, lam, kind, M = _factor_stack(factors)
    if arr.shape[0] < 2:
        raise ValueError("need at least 2 factors")
    if (arr <= 0).any():
        raise NonPositiveFactorError(
            "nonpositive factor entry; use block reduction for zero-column matrices"
        )
    n, d, _ = arr.shape
    eps = 1.0
    if side == "left":
        v = np.full(d, 1.0 / d)
        for k in range(n):
            v = v @ arr[k]
            v /= v.sum()
            if k > 0:
                eps *= 1.0 - d * rho_pair(arr[k - 1], arr[k])
        level = lo + n
    elif side == "right":
        v = np.full(d, 1.0 / d)
        for k in range(n - 1, -1, -1):
            v = arr[k] @ v
            v /= v.sum()
            if k < n - 1:
                eps *= 1.0 - d * rho_pair(arr[k + 1].T, arr[k].T)
        level = lo
    else:
        raise ValueError("side must be 'left' or 'right'")
    return DirectionVector(
        v=v, level=level, lam=lam, side=side,
        error_radius=_radius_from_eps(eps), kind=kind, M=M, factors_consumed=n,
    )


def mu_vectors(phis, warmup: int = 1) -> list[DirectionVector]:
    """Rolling left directions mu for levels lo..hi of the factor window.

    mu at level lo+j consumes the j factors lo..lo+j-1 via
    mu_{k+1} = mu_k Phi_k / (mu_k Phi_k 1); the first max(warmup, 1) vectors
    are flagged unreliable. Radii shrink with the measured rho products.
    """
    arr, lo, lam, kind, M = _factor_stack(phis)
    if (arr <= 0).any():
        raise NonPositiveFactorError(
            "nonpositive factor entry; use block_mu_vectors for zero-column matrices"
        )
    n, d, _ = arr.shape
    out = []
    v = np.full(d, 1.0 / d)
    eps = 1.0
    out.append(DirectionVector(
        v=v, level=lo, lam=lam, side="left", error_radius=float("inf"),
        kind=kind, M=M, warmup=True, factors_consumed=0,
    ))
    for j in range(n):
        v = v @ arr[j]
        v = v / v.sum()
        if j > 0:
            eps *= 1.0 - d * rho_pair(arr[j - 1], arr[j])
        m = j + 1
        out.append(DirectionVector(
            v=v, level=lo + m, lam=lam, side="left",
            error_radius=_radius_from_eps(eps) if m >= 2 else float("inf"),
            kind=kind, M=M, warmup=m < max(warmup, 1), factors_consumed=m,
        ))
    return out


def nu_vectors(phis, warmup: int = 1) -> list[DirectionVector]:
    """Rolling right directions nu for levels lo..hi (nu_k consumes factors k..hi-1)."""
    arr, lo, lam, kind, M = _factor_stack(phis)
    if (arr <= 0).any():
        raise NonPositiveFactorError(
            "nonpositive factor entry; use block_nu_vectors for zero-column matrices"
        )
    n, d, _ = arr.shape
    rev: list[DirectionVector] = []
    v = np.full(d, 1.0 / d)
    eps = 1.0
    rev.append(DirectionVector(
        v=v, level=lo + n, lam=lam, side="right", error_radius=float("inf"),
        kind=kind, M=M, warmup=True, factors_consumed=0,
    ))
    for j in range(n - 1, -1, -1):
        v = arr[j] @ v
        v = v / v.sum()
        if j < n - 1:
            eps *= 1.0 - d * rho_pair(arr[j + 1].T, arr[j].T)
        m = n - j
        rev.append(DirectionVector(
            v=v, level=lo + j, lam=lam, side="right",
            error_radius=_radius_from_eps(eps) if m >= 2 else float("inf"),
            kind=kind, M=M, warmup=m < max(warmup, 1), factors_consumed=m,
        ))
    return rev[::-1]


# ---------------------------------------------------------------------------
# block reduction for (L, R) embeddings with L > R
# ---------------------------------------------------------------------------


def _check_block_pattern(arr: np.ndarray, R: int) -> None:
    if arr.shape[1] <= R:
        raise ValueError("block reduction needs d > R")
    if arr[:, :, R:].any():
        raise ValueError("wrong zero pattern: columns beyond R must be exactly zero")
    if (arr[:, :, :R] <= 0).any():
        raise ValueError("wrong zero pattern: first R columns must be positive")


def block_mu_vectors(phis, R: int, warmup: int = 1) -> list[DirectionVector]:
    """Left directions for zero-column Phi stacks: roll the R x R A-blocks,
    pad with d-R exact zeros."""
    arr, lo, lam, kind, M = _factor_stack(phis)
    _check_block_pattern(arr, R)
    d = arr.shape[1]
    reduced = mu_vectors(
        [PhiMatrix(entries=a[:R, :R], level=lo + k, lam=lam, kind=kind)
         for k, a in enumerate(arr)],
        warmup=warmup,
    )
    out = []
    for dv in reduced:
        padded = np.zeros(d)
        padded[:R] = dv.v
        out.append(DirectionVector(
            v=padded, level=dv.level, lam=lam, side="left",
            error_radius=dv.error_radius, kind=kind, M=M, warmup=dv.warmup,
            factors_consumed=dv.factors_consumed,
        ))
    return out


def block_nu_vectors(phis, R: int, warmup: int = 1) -> list[DirectionVector]:
    """Right directions via the sigma construction: sigma_k is the direction of
    A_{[k,n]} 1; nu_k = Phi_k sigma~_{k+1} / (1^t Phi_k sigma~_{k+1})."""
    arr, lo, lam, kind, M = _factor_stack(phis)
    _check_block_pattern(arr, R)
    n, d, _ = arr.shape
    A = arr[:, :R, :R]

    # rolling sigma: sigma_k = A_k sigma_{k+1} / sum, from the uniform start
    sig = np.full(R, 1.0 / R)
    sigmas = [sig]
    eps = 1.0
    eps_by_pos = [1.0]
    for j in range(n - 1, -1, -1):
        sig = A[j] @ sig
        sig = sig / sig.sum()
        if j < n - 1:
            eps *= 1.0 - R * rho_pair(A[j + 1].T, A[j].T)
        sigmas.append(sig)
        eps_by_pos.append(eps)
    sigmas = sigmas[::-1]  # sigmas[k] for k = 0..n (position relative to lo)
    eps_by_pos = eps_by_pos[::-1]

    out = []
    for k in range(n):
        sig_pad = np.zeros(d)
        sig_pad[:R] = sigmas[k + 1]
        w = arr[k] @ sig_pad
        total = w.sum()
        nu = w / total
        # measured Lipschitz closure mapping the sigma radius through Phi_k
        scale = float(arr[k, :, :R].max()) * d / total
        radius = _radius_from_eps(eps_by_pos[k + 1]) * max(scale, 1.0)
        out.append(DirectionVector(
            v=nu, level=lo + k, lam=lam, side="right",
            error_radius=radius, kind=kind, M=M,
            warmup=(n - k) < max(warmup, 1), factors_consumed=n - k,
        ))
    return out


def block_direction(blocks, side: str = "left", R: int | None = None) -> DirectionVector:
    """Limiting direction for a sequence of BlockPhi (or zero-column stacks).

    side 'left' returns the padded mu limit of the block products; side
    'right' the nu vector of the earliest level via the sigma construction.
    """
    if blocks and isinstance(blocks[0], BlockPhi):
        R = blocks[0].A.shape[0]
        d = R + blocks[0].zero_columns
        arr = np.zeros((len(blocks), d, d))
        for k, b in enumerate(blocks):
            arr[k, :R, :R] = b.A
            arr[k, R:, :R] = b.B
    else:
        arr, _, _, _, _ = _factor_stack(blocks)
        if R is None:
            raise ValueError("R is required when passing raw matrices")
    if side == "left":
        return block_mu_vectors(arr, R)[-1]
    if side == "right":
        return block_nu_vectors(arr, R)[0]
    raise ValueError("side must be 'left' or 'right'")


def raw_normalized_left(factors, pi: np.ndarray | None = None) -> np.ndarray:
    """pi G_1 ... G_m normalized, with no positivity requirement (oracle helper)."""
    arr, _, _, _, _ = _factor_stack(factors)
    v = np.full(arr.shape[1], 1.0 / arr.shape[1]) if pi is None else np.asarray(pi, float)
    for k in range(arr.shape[0]):
        v = v @ arr[k]
        v = v / v.sum()
    return v


def raw_normalized_right(factors) -> np.ndarray:
    """G_1 ... G_m 1 normalized (oracle helper)."""
    arr, _, _, _, _ = _factor_stack(factors)
    v = np.ones(arr.shape[1])
    v = v / v.sum()
    for k in range(arr.shape[0] - 1, -1, -1):
        v = arr[k] @ v
        v = v / v.sum()
    return v
