"""Brute-force and quadrature reference implementations for testing.

Nothing here calls the production inference code: sequences are
enumerated explicitly, expectations use tensor-product Gauss-Hermite
rules, and Gaussian KL divergences use the textbook closed form.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss


class OracleBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class OracleBudget:
    max_states: int = 10 ** 6
    nodes: int = 20
    fd_step: float = 1e-5
    max_quad_dim: int = 6
    max_quad_points: int = 2 * 10 ** 6


BUDGET = OracleBudget()


def _all_paths(T, V, budget=BUDGET):
    if V ** T > budget.max_states:
        raise OracleBudgetError(f"V^T = {V ** T} exceeds the enumeration cap {budget.max_states}")
    return np.array(list(itertools.product(range(V), repeat=T)), dtype=int).reshape(-1, T)


def _scores(u, p, paths):
    T = u.shape[0]
    s = u[np.arange(T), paths].sum(axis=1)
    if T > 1:
        s = s + p[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return s


def _lse(a):
    m = np.max(a)
    return m + np.log(np.sum(np.exp(a - m)))


def brute_log_partition(u, p, budget=BUDGET) -> float:
    u, p = np.asarray(u, float), np.asarray(p, float)
    return float(_lse(_scores(u, p, _all_paths(*u.shape, budget))))


def brute_log_likelihood(y, u, p, budget=BUDGET) -> float:
    u, p = np.asarray(u, float), np.asarray(p, float)
    y = np.asarray(y, dtype=int)[None, :]
    return float(_scores(u, p, y)[0] - brute_log_partition(u, p, budget))


def brute_marginals(u, p, budget=BUDGET) -> np.ndarray:
    u, p = np.asarray(u, float), np.asarray(p, float)
    T, V = u.shape
    paths = _all_paths(T, V, budget)
    s = _scores(u, p, paths)
    prob = np.exp(s - _lse(s))
    out = np.zeros((T, V))
    for t in range(T):
        np.add.at(out[t], paths[:, t], prob)
    return out


def brute_viterbi(u, p, budget=BUDGET) -> np.ndarray:
    """Best path; among exact ties the lexicographically smallest wins."""
    u, p = np.asarray(u, float), np.asarray(p, float)
    paths = _all_paths(*u.shape, budget)
    return paths[int(np.argmax(_scores(u, p, paths)))]


def brute_pseudo(y, u, p) -> float:
    """Sum of per-factor log-softmax terms, coded factor by factor."""
    u, p = np.asarray(u, float), np.asarray(p, float)
    total = 0.0
    for t, lab in enumerate(y):
        total += u[t, lab] - _lse(u[t])
    for t in range(len(y) - 1):
        total += p[y[t], y[t + 1]] - _lse(p.ravel())
    return float(total)


def quadrature_ell(marginal, y, k: int = 0, nodes: int = BUDGET.nodes, budget=BUDGET) -> float:
    """E[log p(y | f)] under component ``k`` of a sequence marginal.

    ``marginal`` needs ``mean (K, V, T)``, ``cov (K, V, T, T)``, ``m_bin``
    and ``s_bin`` (length V^2). The latent vector stacks the V unary
    blocks and, when T > 1, the V^2 pairwise values; a tensor-product
    Gauss-Hermite rule integrates the brute-force log-likelihood.
    """
    mean = np.asarray(marginal.mean[k], float)
    cov = np.asarray(marginal.cov[k], float)
    V, T = mean.shape
    y = np.asarray(y, dtype=int)
    mus = [mean.ravel()]
    blocks = [cov[j] for j in range(V)]
    if T > 1:
        mus.append(np.asarray(marginal.m_bin, float))
        blocks.extend(np.atleast_2d(v) for v in np.asarray(marginal.s_bin, float))
    mu = np.concatenate(mus)
    d = mu.size
    if d > budget.max_quad_dim:
        raise OracleBudgetError(f"latent dimension {d} exceeds the quadrature cap {budget.max_quad_dim}")
    if nodes ** d > budget.max_quad_points:
        raise OracleBudgetError(f"{nodes}^{d} quadrature points exceed the cap")
    Sigma = np.zeros((d, d))
    o = 0
    for b in blocks:
        n = b.shape[0]
        Sigma[o:o + n, o:o + n] = b
        o += n
    lam, U = np.linalg.eigh(Sigma)
    R = U * np.sqrt(np.clip(lam, 0.0, None))          # works for singular covariances
    x, w = hermegauss(nodes)
    w = w / np.sqrt(2.0 * np.pi)
    total = 0.0
    for idx in itertools.product(range(nodes), repeat=d):
        idx = np.array(idx)
        z = mu + R @ x[idx]
        f = z[:V * T].reshape(V, T).T
        pw = z[V * T:].reshape(V, V) if T > 1 else np.zeros((V, V))
        total += np.prod(w[idx]) * brute_log_likelihood(y, f, pw, budget)
    return float(total)


def gauss_kl(m0, S0, m1, S1) -> float:
    """KL(N(m0, S0) || N(m1, S1))."""
    m0, m1 = np.atleast_1d(np.asarray(m0, float)), np.atleast_1d(np.asarray(m1, float))
    S0, S1 = np.atleast_2d(np.asarray(S0, float)), np.atleast_2d(np.asarray(S1, float))
    L0, L1 = np.linalg.cholesky(S0), np.linalg.cholesky(S1)
    S1inv = np.linalg.inv(S1)
    dm = m1 - m0
    logdet = 2.0 * (np.sum(np.log(np.diag(L1))) - np.sum(np.log(np.diag(L0))))
    return float(0.5 * (np.trace(S1inv @ S0) + dm @ S1inv @ dm - m0.size + logdet))


def fd_gradient(fn, params, step: float = BUDGET.fd_step) -> np.ndarray:
    """Central differences of a deterministic scalar function.

    For Monte-Carlo objectives ``fn`` must fix its own random streams so
    both probes see the same draws (common random numbers).
    """
    x = np.asarray(params, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        hi, lo = fn(x + e), fn(x - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite probe at coordinate {i}")
        g.flat[i] = (hi - lo) / (2.0 * step)
    return g
