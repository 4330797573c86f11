"""Monte-Carlo expected log-likelihood and score-function gradients.

For every sequence ``n`` and mixture component ``k`` the estimator draws
``S`` samples from the per-sequence block Gaussians (T-dimensional unary
blocks, univariate pairwise draws), scores them with a likelihood callback
and averages. Gradients use the log-derivative identity, so the likelihood
is only ever evaluated, never differentiated.

Random streams are keyed by ``(seed, purpose, epoch, n, k)``; results are
therefore independent of the subset composition and of the worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .chain import get_likelihood
from .posterior import (LOG2PI, InducingSet, Projection, SequenceMarginal, VariationalPosterior,
                        build_marginal, latents_from_draws, project, standard_draws,
                        weights_grad_to_logits)

# stream namespaces
TRAIN, EVALUATE, PREDICT, HYPER = 0, 1, 2, 3


class EstimationError(FloatingPointError):
    """Likelihood returned a non-finite value for sample ``(n, k, i)``."""

    def __init__(self, n: int, k: int, i: int):
        self.where = (n, k, i)
        super().__init__(f"non-finite log-likelihood at sequence {n}, component {k}, sample {i}")


@dataclass
class MCConfig:
    """Sampling settings.

    ``cv_holdout`` is the fraction of each sample set used only to fit the
    control-variate coefficients; those samples are excluded from the
    corrected gradient mean.
    """

    samples: int = 10_000
    cv_holdout: float = 0.1
    control_variates: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be positive")
        if self.control_variates:
            h = self.holdout
            if self.samples < 2 or not 1 <= h < self.samples:
                raise ValueError("control variates need 1 <= cv_holdout * samples < samples")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def holdout(self) -> int:
        return int(round(self.cv_holdout * self.samples))


@dataclass
class EllEstimate:
    value: float
    per_sequence: np.ndarray
    subset: np.ndarray
    stderr: float
    grad: Optional[dict] = None
    log_lik: Optional[list] = field(default=None, repr=False)


def stream(seed: int, purpose: int, epoch: int, n: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, epoch, n, k]))


def projections(ind: InducingSet, X: Sequence) -> list:
    """Per-sequence A and Ktilde; depend only on kernels and Z, so cache them."""
    return [project(ind, Xn) for Xn in X]


def apply_control_variates(g, h, holdout):
    """Control-variate corrected mean of ``g`` along axis 0.

    ``holdout`` (indices or boolean mask) selects the samples used to fit
    ``a = Cov[g, h] / Var[h]`` per coordinate; the result is the mean of
    ``g - a h`` over the remaining samples. E[h] is taken to be exactly 0.
    """
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    if g.shape != h.shape:
        raise ValueError("g and h must have the same shape")
    mask = np.zeros(g.shape[0], dtype=bool)
    mask[holdout] = True
    if mask.all() or not mask.any():
        raise ValueError("holdout must be a proper non-empty subset")
    gh, hh = g[mask], h[mask]
    hc = hh - hh.mean(axis=0)
    var = np.mean(hc * hc, axis=0)
    cov = np.mean((gh - gh.mean(axis=0)) * hc, axis=0)
    a = np.where(var > 1e-300, cov / np.where(var > 1e-300, var, 1.0), 0.0)
    return np.mean(g[~mask] - a * h[~mask], axis=0)


def _cv_rank1(beta, gamma, C, w, hold):
    """Corrected mean of ``w_i (beta_i gamma_i^T - C)`` over samples.

    Moments are accumulated with matrix products so the per-sample
    (M, M) matrices are never materialized. ``hold=0`` disables the
    correction and averages over all samples.
    """
    if hold == 0:
        return (beta * w[..., :, None]).swapaxes(-1, -2) @ gamma / w.shape[-1] - C * w.mean(-1)[..., None, None]
    bh, gh, wh = beta[..., :hold, :], gamma[..., :hold, :], w[..., :hold]
    be, ge, we = beta[..., hold:, :], gamma[..., hold:, :], w[..., hold:]
    nh, ne = hold, w.shape[-1] - hold
    T = lambda a: a.swapaxes(-1, -2)  # noqa: E731
    wmean = wh.mean(-1)[..., None, None]
    bw = bh * wh[..., :, None]
    m_bg = T(bh) @ gh / nh
    m_h = m_bg - C
    m_wbg = T(bw) @ gh / nh
    m_wh = m_wbg - C * wmean
    g2 = gh * gh
    m_h2 = T(bh * bh) @ g2 / nh - 2.0 * C * m_bg + C * C
    m_wh2 = T(bw * bh) @ g2 / nh - 2.0 * C * m_wbg + C * C * wmean
    var = m_h2 - m_h * m_h
    cov = m_wh2 - m_wh * m_h
    ok = var > 1e-300
    a = np.where(ok, cov / np.where(ok, var, 1.0), 0.0)
    e_wh = T(be * we[..., :, None]) @ ge / ne - C * we.mean(-1)[..., None, None]
    e_h = T(be) @ ge / ne - C
    return e_wh - a * e_h


def _cv_direct(h, w, hold):
    g = h * w[:, None]
    if hold == 0:
        return g.mean(axis=0)
    return apply_control_variates(g, h, slice(0, hold))


def _log_density(marg: SequenceMarginal, k: int, f, p):
    """log q_k(f) + log q(f_bin) for drawn scores f (S, T, V), p (S, V, V)."""
    S, T, V = f.shape
    out = np.zeros(S)
    for j in range(V):
        L = marg.chol[k, j]
        r = f[:, :, j] - marg.mean[k, j]
        z = solve_triangular(L, r.T, lower=True, check_finite=False)
        out += -0.5 * (T * LOG2PI + np.sum(z * z, axis=0)) - np.sum(np.log(np.diag(L)))
    d = p.reshape(S, -1) - marg.m_bin
    out += np.sum(-0.5 * (LOG2PI + np.log(marg.s_bin) + d * d / marg.s_bin), axis=1)
    return out


def _sequence(post, proj, y, n, lik, cfg, purpose, epoch, want_grad, proposal):
    """Per-sequence value, per-component sample means and raw gradient pieces."""
    marg = build_marginal(post, None, proj=proj)
    pmarg = build_marginal(proposal, None, proj=proj) if proposal is not None else None
    K, V, M = post.means.shape
    S = cfg.samples
    hold = cfg.holdout if (want_grad and cfg.control_variates) else 0
    w_k = post.weights
    comp_means = np.empty(K)
    comp_vars = np.empty(K)
    logliks = []
    if want_grad:
        g_means = np.zeros((K, V, M))
        g_chol = np.zeros((K, V, M, M))
        g_mbin = np.zeros(V * V)
        g_sbin = np.zeros(V * V)
        Lq = post.chol
        sig_diag = expit(np.diagonal(post.chol_raw, axis1=-2, axis2=-1))
        sig_s = expit(post.s_bin_raw)
        sd_bin = np.sqrt(marg.s_bin)
    for k in range(K):
        rng = stream(cfg.seed, purpose, epoch, n, k)
        src = pmarg if pmarg is not None else marg
        eps_u, eps_b = standard_draws(src, rng, S)
        f, p = latents_from_draws(src, k, eps_u, eps_b)
        w = np.asarray(lik(y, f, p), dtype=float)
        if not np.all(np.isfinite(w)):
            raise EstimationError(n, k, int(np.flatnonzero(~np.isfinite(w))[0]))
        logliks.append(w)
        if pmarg is not None:
            ratio = np.exp(_log_density(marg, k, f, p) - _log_density(pmarg, k, f, p))
            wv = ratio * w
        else:
            wv = w
        comp_means[k] = wv.mean()
        comp_vars[k] = wv.var(ddof=1) if S > 1 else 0.0
        if not want_grad:
            continue
        # score wrt the T-dim block: S_n^{-1} (f - b) = L_n^{-T} eps
        Ln = marg.chol[k]                                        # (V, T, T)
        alpha = np.stack([solve_triangular(Ln[j], eps_u[:, j, :].T, lower=True, trans="T",
                                           check_finite=False).T for j in range(V)])  # (V, S, T)
        beta = alpha @ proj.A                                    # (V, S, M)
        gamma = beta @ Lq[k]                                     # (V, S, M)
        SinvA = np.stack([solve_triangular(Ln[j], solve_triangular(Ln[j], proj.A[j], lower=True,
                                           check_finite=False), lower=True, trans="T",
                                           check_finite=False) for j in range(V)])
        C = np.swapaxes(proj.A, -1, -2) @ SinvA @ Lq[k]           # (V, M, M)
        wj = np.broadcast_to(w, (V, S))
        gl = np.tril(_cv_rank1(beta, gamma, C, wj, hold))
        idx = np.arange(M)
        gl[:, idx, idx] *= sig_diag[k]
        if post.diagonal:
            gl = gl * np.eye(M)
        g_chol[k] = w_k[k] * gl
        for j in range(V):
            g_means[k, j] = w_k[k] * _cv_direct(beta[j], w, hold)
        g_mbin += w_k[k] * _cv_direct(eps_b / sd_bin, w, hold)
        g_sbin += w_k[k] * sig_s * _cv_direct(0.5 * (eps_b * eps_b - 1.0) / marg.s_bin, w, hold)
    value = float(np.dot(w_k, comp_means))
    var = float(np.dot(w_k ** 2, comp_vars) / S)
    grads = None
    if want_grad:
        grads = {"logits": weights_grad_to_logits(post, comp_means), "means": g_means,
                 "chol": g_chol, "m_bin": g_mbin, "s_bin": g_sbin}
    return value, var, grads, logliks


def _run(post, ind, data, cfg, likelihood, subset, epoch, purpose, proj, want_grad, proposal):
    lik = get_likelihood(likelihood)
    X, Y = data.X, data.y
    subset = np.arange(len(Y)) if subset is None else np.asarray(subset, dtype=np.intp)
    if subset.size == 0:
        raise ValueError("subset must be non-empty")
    get_proj = (lambda n: project(ind, X[n])) if proj is None else (lambda n: proj[n])

    def one(n):
        return _sequence(post, get_proj(n), Y[n], int(n), lik, cfg, purpose, epoch,
                         want_grad, proposal)

    if cfg.threads > 1 and subset.size > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            results = list(ex.map(one, subset))
    else:
        results = [one(n) for n in subset]
    per_seq = np.array([r[0] for r in results])
    value = math.fsum(per_seq)
    stderr = math.sqrt(math.fsum(r[1] for r in results))
    grad = None
    if want_grad:
        grad = {}
        for key in results[0][2]:
            acc = np.zeros_like(results[0][2][key])
            for r in results:  # fixed order, independent of worker count
                acc = acc + r[2][key]
            grad[key] = acc
    return EllEstimate(value, per_seq, subset, stderr, grad, [r[3] for r in results])


def estimate_ell(post: VariationalPosterior, ind: InducingSet, data, cfg: MCConfig,
                 likelihood="exact", subset=None, epoch: int = 0, purpose: int = TRAIN,
                 proj=None, proposal: VariationalPosterior = None) -> EllEstimate:
    """Monte-Carlo estimate of sum_n sum_k pi_k E_{q_k}[log p(y_n | f_n)].

    ``proj`` is an optional list of precomputed :class:`Projection` objects
    indexed by sequence. With ``proposal`` the draws come from the
    proposal's marginals and are importance-weighted to ``post``; since
    the draws are then fixed, finite differences of this value in the
    parameters of ``post`` (evaluated at ``post == proposal``) reproduce
    the score-function gradient sample for sample.
    """
    return _run(post, ind, data, cfg, likelihood, subset, epoch, purpose, proj, False, proposal)


def grad_ell(post: VariationalPosterior, ind: InducingSet, data, cfg: MCConfig,
             likelihood="exact", subset=None, epoch: int = 0, purpose: int = TRAIN,
             proj=None) -> EllEstimate:
    """Value plus score-function gradient in raw parameter coordinates."""
    return _run(post, ind, data, cfg, likelihood, subset, epoch, purpose, proj, True, None)
