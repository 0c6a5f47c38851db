import math

import numpy as np
import pytest

from stripldp.env import EnvironmentSlice, EnvironmentSpec


def d1_phi_closed(p, lam, r=0.0):
    """Smaller root of e^l q phi^2 - (1 - e^l r) phi + e^l p = 0 in the
    cancellation-stable form (the probabilistic excursion MGF for d=1)."""
    q = 1.0 - p - r
    el = math.exp(lam)
    disc = (1.0 - r * el) ** 2 - 4.0 * p * q * el * el
    if disc < 0:
        return math.inf
    return 2.0 * p * el / ((1.0 - r * el) + math.sqrt(disc))


def d1_lambda_crit(p, r=0.0):
    q = 1.0 - p - r
    # discriminant zero: (1 - r e^l)^2 = 4 p q e^{2l}; for r=0 this is -log(4pq)/2
    if r == 0.0:
        return -0.5 * math.log(4.0 * p * q)
    return math.log(1.0 / (r + 2.0 * math.sqrt(p * q)))


def d1_lambda_prime(p, lam, h=1e-7):
    lo = math.log(d1_phi_closed(p, lam - h))
    hi = math.log(d1_phi_closed(p, lam + h))
    return (hi - lo) / (2.0 * h)


def random_d2_slice(rng, kappa=0.08, drift=0.0):
    """Elliptic d=2 slice: q and p entries floored at kappa (so the entry
    conditions hold), remaining mass spread randomly; drift > 0 shifts the
    random remainder toward p."""
    d = 2
    q = np.full((d, d), kappa)
    p = np.full((d, d), kappa)
    r = np.zeros((d, d))
    rem = 1.0 - 2 * d * kappa
    for i in range(d):
        extra = rng.dirichlet(np.ones(3 * d)) * rem
        q_share = extra[:d] * (1.0 - drift)
        p_share = extra[2 * d:] + extra[:d] * drift
        q[i] += q_share
        r[i] += extra[d:2 * d]
        p[i] += p_share
    return EnvironmentSlice(q=q, r=r, p=p)


def random_d2_iid_spec(seed, kappa=0.08, n_support=3, drift=0.0):
    rng = np.random.default_rng(seed)
    slices = tuple(random_d2_slice(rng, kappa, drift) for _ in range(n_support))
    w = rng.dirichlet(np.ones(n_support))
    return EnvironmentSpec(
        kind="iid", d=2, kappa=kappa, slices=slices, weights=tuple(w)
    )


def enumerate_truncated_phi(window, k, M, lam):
    """Exhaustive path enumeration oracle for Phi_{k,M}(lambda).

    Walks every path of length <= M from (k, i) until first arrival at level
    k+1, accumulating e^{lambda * steps} * P(path). Independent of the DP:
    literally sums over paths of the chain.
    """
    d = window.d
    el = math.exp(lam)
    out = np.zeros((d, d))
    for i0 in range(d):
        stack = [(k, i0, 0, 1.0)]
        while stack:
            lev, h, steps, prob = stack.pop()
            if steps == M or prob == 0.0:
                continue
            wk = window.index_of(lev)
            for j in range(d):
                pq = window.q[wk, h, j]
                if pq > 0:
                    stack.append((lev - 1, j, steps + 1, prob * pq))
                pr = window.r[wk, h, j]
                if pr > 0:
                    stack.append((lev, j, steps + 1, prob * pr))
                pp = window.p[wk, h, j]
                if pp > 0:
                    if lev + 1 == k + 1:
                        out[i0, j] += prob * pp * el ** (steps + 1)
                    else:
                        stack.append((lev + 1, j, steps + 1, prob * pp))
    return out


def enumerate_hitting_distribution(window, n, M, start_height=0, max_steps=None):
    """P(T_n = s, all tau_k <= M) by exhaustive path enumeration (d=1 only
    needed at desk scale, but written for any d). Returns {s: prob}."""
    d = window.d
    cap = max_steps if max_steps is not None else n * M
    out: dict[int, float] = {}
    # state: (level, height, steps, steps_at_last_advance, best_level, prob)
    stack = [(0, start_height, 0, 0, 0, 1.0)]
    while stack:
        lev, h, steps, last_adv, best, prob = stack.pop()
        if steps == cap or prob == 0.0:
            continue
        wk = window.index_of(lev)
        for j in range(d):
            for dlev, mat in ((-1, window.q), (0, window.r), (1, window.p)):
                pr = mat[wk, h, j]
                if pr == 0.0:
                    continue
                nlev = lev + dlev
                nsteps = steps + 1
                nbest, nlast = best, last_adv
                if nlev > best:
                    nbest = nlev
                    if nsteps - last_adv > M:
                        continue  # excursion cap violated
                    nlast = nsteps
                elif nsteps - last_adv >= M and nbest < n:
                    continue  # current excursion can no longer finish in time
                if nlev == n:
                    out[nsteps] = out.get(nsteps, 0.0) + prob * pr
                else:
                    stack.append((nlev, j, nsteps, nlast, nbest, prob * pr))
    return out


def power_iteration_direction(mat, iters=400):
    """Dominant left-eigenvector direction of a positive matrix."""
    v = np.full(mat.shape[0], 1.0 / mat.shape[0])
    for _ in range(iters):
        v = v @ mat
        v = v / v.sum()
    return v


@pytest.fixture(scope="session")
def p075_spec():
    from stripldp.env import homogeneous_d1_spec

    return homogeneous_d1_spec(0.75, kappa=0.25)


@pytest.fixture(scope="session")
def p025_spec():
    from stripldp.env import homogeneous_d1_spec

    return homogeneous_d1_spec(0.25, kappa=0.25)


@pytest.fixture(scope="session")
def recurrent_spec():
    from stripldp.env import homogeneous_d1_spec

    return homogeneous_d1_spec(0.5, kappa=0.4)
