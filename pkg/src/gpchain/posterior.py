"""Sparse GP prior, mixture-of-Gaussians posterior and the analytic KL terms.

Parameter conventions
---------------------
Mixture weights are stored as unconstrained logits. Each inducing covariance
``S_kj`` is stored as a lower-triangular factor whose diagonal lives in
softplus space, and the pairwise variances ``s_bin`` are softplus-transformed
too, so any real parameter vector maps to a valid posterior.

Gradients come in two flavours:

* *natural* gradients wrt ``weights`` (K,), ``means`` (K, V, M), ``cov``
  (K, V, M, M, symmetric), ``m_bin`` and ``s_bin`` (variances);
* *raw* gradients wrt the stored parameters, keyed by the names in
  :data:`SEGMENTS`. :func:`natural_to_raw` applies the chain rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, logsumexp, softmax

from .kernels import Cholesky, KernelSpec, as_specs, cholesky, factor_gram, gram, unique_specs

SEGMENTS = ("logits", "means", "chol", "m_bin", "s_bin")
LOG2PI = np.log(2.0 * np.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass
class InducingSet:
    """Inducing inputs ``Z`` (shared across processes) and per-process kernels."""

    Z: np.ndarray
    specs: tuple
    _chols: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        if self.Z.ndim != 2 or self.Z.shape[0] < 1:
            raise ValueError("Z must be a non-empty (M, D) matrix")
        self.specs = tuple(self.specs)
        for s in unique_specs(self.specs):
            self._chols[s] = factor_gram(s, self.Z)

    @classmethod
    def shared(cls, Z, spec: KernelSpec, V: int) -> "InducingSet":
        return cls(Z, as_specs(spec, V))

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def V(self) -> int:
        return len(self.specs)

    @property
    def D(self) -> int:
        return self.Z.shape[1]

    def chol(self, j: int) -> Cholesky:
        return self._chols[self.specs[j]]

    def with_specs(self, specs) -> "InducingSet":
        return InducingSet(self.Z, as_specs(specs, self.V))


@dataclass
class VariationalPosterior:
    """q(u) = sum_k pi_k prod_j N(m_kj, S_kj) and q(f_bin) = N(m_bin, diag(s_bin))."""

    logits: np.ndarray
    means: np.ndarray
    chol_raw: np.ndarray
    m_bin: np.ndarray
    s_bin_raw: np.ndarray
    k_bin: Optional[np.ndarray] = None
    diagonal: bool = False
    _kbin_chol: Optional[Cholesky] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.chol_raw = np.asarray(self.chol_raw, dtype=float)
        self.m_bin = np.asarray(self.m_bin, dtype=float)
        self.s_bin_raw = np.asarray(self.s_bin_raw, dtype=float)
        K, V, M = self.means.shape
        if self.logits.shape != (K,) or self.chol_raw.shape != (K, V, M, M):
            raise ValueError("inconsistent posterior shapes")
        if self.m_bin.shape != (V * V,) or self.s_bin_raw.shape != (V * V,):
            raise ValueError("pairwise parameters must have V^2 entries")
        self.chol_raw = np.tril(self.chol_raw)
        if self.diagonal:
            self.chol_raw = self.chol_raw * np.eye(M)
        if self.k_bin is None:
            self.k_bin = np.eye(V * V)
        self.k_bin = np.asarray(self.k_bin, dtype=float)

    # construction -------------------------------------------------------
    @classmethod
    def from_moments(cls, weights, means, covs, m_bin, s_bin, k_bin=None, diagonal=False):
        weights = np.asarray(weights, dtype=float)
        covs = np.asarray(covs, dtype=float)
        L = np.linalg.cholesky(covs)
        raw = L.copy()
        idx = np.arange(L.shape[-1])
        raw[..., idx, idx] = softplus_inv(L[..., idx, idx])
        return cls(np.log(weights), means, raw, m_bin, softplus_inv(s_bin), k_bin, diagonal)

    @classmethod
    def initial(cls, K: int, V: int, M: int, rng: np.random.Generator = None,
                cov_scale: float = 0.1, mean_jitter: float = 0.1, s_bin: float = 1.0,
                k_bin=None, diagonal=False):
        """Uniform weights, zero means (components after the first jittered),
        ``S_kj = cov_scale * I``, ``m_bin = 0`` and ``s_bin = s_bin``."""
        means = np.zeros((K, V, M))
        if K > 1:
            rng = rng if rng is not None else np.random.default_rng(0)
            means[1:] = mean_jitter * rng.standard_normal((K - 1, V, M))
        covs = np.broadcast_to(cov_scale * np.eye(M), (K, V, M, M))
        return cls.from_moments(np.full(K, 1.0 / K), means, covs,
                                np.zeros(V * V), np.full(V * V, s_bin), k_bin, diagonal)

    # derived quantities -------------------------------------------------
    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def V(self) -> int:
        return self.means.shape[1]

    @property
    def M(self) -> int:
        return self.means.shape[2]

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def chol(self) -> np.ndarray:
        L = self.chol_raw.copy()
        idx = np.arange(self.M)
        L[..., idx, idx] = softplus(self.chol_raw[..., idx, idx])
        return L

    @property
    def cov(self) -> np.ndarray:
        L = self.chol
        return L @ np.swapaxes(L, -1, -2)

    @property
    def s_bin(self) -> np.ndarray:
        return softplus(self.s_bin_raw)

    @property
    def kbin_chol(self) -> Cholesky:
        if self._kbin_chol is None:
            self._kbin_chol = cholesky(self.k_bin)
        return self._kbin_chol

    # flat parameter view ------------------------------------------------
    def _tri(self):
        M = self.M
        return (np.arange(M), np.arange(M)) if self.diagonal else np.tril_indices(M)

    def segment_sizes(self) -> dict:
        K, V, M = self.means.shape
        ntri = M if self.diagonal else M * (M + 1) // 2
        return {"logits": K, "means": K * V * M, "chol": K * V * ntri,
                "m_bin": V * V, "s_bin": V * V}

    def slices(self) -> dict:
        out, start = {}, 0
        for name, size in self.segment_sizes().items():
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def size(self) -> int:
        return sum(self.segment_sizes().values())

    def pack(self, parts: dict) -> np.ndarray:
        """Flatten a raw-gradient (or raw-parameter) dict into one vector."""
        r, c = self._tri()
        return np.concatenate([
            np.ravel(parts["logits"]), np.ravel(parts["means"]),
            np.asarray(parts["chol"])[..., r, c].ravel(),
            np.ravel(parts["m_bin"]), np.ravel(parts["s_bin"])])

    def unpack(self, vec: np.ndarray) -> dict:
        K, V, M = self.means.shape
        sl = self.slices()
        r, c = self._tri()
        chol = np.zeros((K, V, M, M))
        chol[..., r, c] = vec[sl["chol"]].reshape(K, V, -1)
        return {"logits": vec[sl["logits"]].copy(),
                "means": vec[sl["means"]].reshape(K, V, M).copy(),
                "chol": chol, "m_bin": vec[sl["m_bin"]].copy(),
                "s_bin": vec[sl["s_bin"]].copy()}

    def raw_params(self) -> dict:
        return {"logits": self.logits, "means": self.means, "chol": self.chol_raw,
                "m_bin": self.m_bin, "s_bin": self.s_bin_raw}

    def to_vector(self) -> np.ndarray:
        return self.pack(self.raw_params())

    def from_vector(self, vec) -> "VariationalPosterior":
        p = self.unpack(np.asarray(vec, dtype=float))
        return replace(self, logits=p["logits"], means=p["means"], chol_raw=p["chol"],
                       m_bin=p["m_bin"], s_bin_raw=p["s_bin"], _kbin_chol=self._kbin_chol)

    def zero_grad(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.raw_params().items()}

    def check(self):
        """Assert the domain invariants (simplex weights, PD covariances)."""
        w = self.weights
        assert np.all(w >= 0) and abs(w.sum() - 1.0) < 1e-12
        L = self.chol
        assert np.all(np.diagonal(L, axis1=-2, axis2=-1) > 0)
        assert np.all(self.s_bin > 0)
        assert np.all(np.isfinite(self.to_vector()))


# chain rule from natural to raw coordinates --------------------------------

def cov_grad_to_chol(post: VariationalPosterior, G: np.ndarray) -> np.ndarray:
    """Map dF/dS (symmetric G) to dF/d(raw lower factor)."""
    L = post.chol
    out = np.tril(2.0 * G @ L)
    idx = np.arange(post.M)
    out[..., idx, idx] *= expit(post.chol_raw[..., idx, idx])
    if post.diagonal:
        out = out * np.eye(post.M)
    return out


def weights_grad_to_logits(post: VariationalPosterior, g: np.ndarray) -> np.ndarray:
    w = post.weights
    return w * (g - np.dot(w, g))


def natural_to_raw(post: VariationalPosterior, nat: dict) -> dict:
    out = post.zero_grad()
    if "weights" in nat:
        out["logits"] = weights_grad_to_logits(post, nat["weights"])
    if "means" in nat:
        out["means"] = np.asarray(nat["means"], dtype=float).copy()
    if "cov" in nat:
        out["chol"] = cov_grad_to_chol(post, nat["cov"])
    if "m_bin" in nat:
        out["m_bin"] = np.asarray(nat["m_bin"], dtype=float).copy()
    if "s_bin" in nat:
        out["s_bin"] = nat["s_bin"] * expit(post.s_bin_raw)
    return out


# per-sequence marginals ----------------------------------------------------

@dataclass
class Projection:
    """Posterior-independent pieces of one sequence's marginal.

    ``A[j] = k(X_n, Z) K_zz^{-1}`` and ``Ktilde[j] = k(X_n, X_n) - A[j] k(Z, X_n)``.
    """

    A: np.ndarray
    Ktilde: np.ndarray

    @property
    def T(self) -> int:
        return self.A.shape[1]


def project(ind: InducingSet, Xn) -> Projection:
    T = Xn.shape[0]
    A = np.empty((ind.V, T, ind.M))
    Kt = np.empty((ind.V, T, T))
    done = {}
    for j, spec in enumerate(ind.specs):
        if spec not in done:
            Knz = gram(spec, Xn, ind.Z)
            Aj = ind.chol(j).solve(Knz.T).T
            Ktj = gram(spec, Xn) - Aj @ Knz.T
            done[spec] = (Aj, 0.5 * (Ktj + Ktj.T))
        A[j], Kt[j] = done[spec]
    return Projection(A, Kt)


def _block_chol(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    flat = cov.reshape((-1,) + cov.shape[-2:])
    out = np.empty_like(flat)
    for i, C in enumerate(flat):
        scale = max(float(np.mean(np.diag(C))), 1e-300)
        out[i] = cholesky(C, retry_jitter=1e-8 * scale + 1e-12).L
    return out.reshape(cov.shape)


@dataclass
class SequenceMarginal:
    """Block Gaussians over one sequence's unary latents, per component.

    ``mean[k, j]`` (T,) and ``cov[k, j]`` (T, T) give q_k(f_{n, j}); the
    pairwise Gaussian is the posterior's, carried along for sampling.
    """

    proj: Projection
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    m_bin: np.ndarray
    s_bin: np.ndarray

    @property
    def A(self):
        return self.proj.A

    @property
    def Ktilde(self):
        return self.proj.Ktilde

    @property
    def T(self) -> int:
        return self.mean.shape[-1]

    @property
    def V(self) -> int:
        return self.mean.shape[1]


def build_marginal(post: VariationalPosterior, ind: InducingSet, Xn=None,
                   proj: Projection = None) -> SequenceMarginal:
    """Means ``A m_kj`` and covariances ``Ktilde + A S_kj A^T`` for one sequence."""
    if proj is None:
        proj = project(ind, Xn)
    A = proj.A
    mean = np.einsum("jtm,kjm->kjt", A, post.means)
    AL = np.einsum("jtm,kjmr->kjtr", A, post.chol)
    cov = proj.Ktilde[None] + AL @ np.swapaxes(AL, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    chol = _block_chol(cov)
    cov = chol @ np.swapaxes(chol, -1, -2)
    return SequenceMarginal(proj, mean, cov, chol, post.m_bin.copy(), post.s_bin.copy())


def mvn_draw(mean: np.ndarray, chol: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Correlated draws ``mean + chol @ eps`` for eps of shape (S, T)."""
    return mean + eps @ chol.T


def univariate_draw(mean: np.ndarray, var: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return mean + np.sqrt(var) * eps


def standard_draws(marg: SequenceMarginal, rng: np.random.Generator, size: int):
    """Standard normals in the fixed stream order: unary blocks then pairwise."""
    eps_u = rng.standard_normal((size, marg.V, marg.T))
    eps_b = rng.standard_normal((size, marg.V * marg.V))
    return eps_u, eps_b


def latents_from_draws(marg: SequenceMarginal, k: int, eps_u, eps_b):
    """Map standard draws to (unary (S, T, V), pairwise (S, V, V)) scores."""
    S, V, T = eps_u.shape
    f = np.empty((S, T, V))
    for j in range(V):
        f[:, :, j] = mvn_draw(marg.mean[k, j], marg.chol[k, j], eps_u[:, j, :])
    p = univariate_draw(marg.m_bin, marg.s_bin, eps_b).reshape(S, V, V)
    return f, p


def sample_latents(marg: SequenceMarginal, k: int, rng: np.random.Generator, size: int = None):
    """Draw unary and pairwise scores for component ``k``.

    Only T-dimensional correlated draws (one per label process) and
    univariate pairwise draws are made. ``size=None`` returns a single
    ``(T, V)``/``(V, V)`` pair; otherwise a leading sample axis is added.
    """
    eps_u, eps_b = standard_draws(marg, rng, 1 if size is None else size)
    f, p = latents_from_draws(marg, k, eps_u, eps_b)
    return (f[0], p[0]) if size is None else (f, p)


# KL pieces -----------------------------------------------------------------

def kl_pairwise(post: VariationalPosterior):
    """``-KL(q(f_bin) || p(f_bin))`` and its natural gradient (m_bin, s_bin)."""
    kc = post.kbin_chol
    m, s = post.m_bin, post.s_bin
    kinv_m = kc.solve(m)
    kinv_diag = np.diag(kc.inverse())
    n = m.size
    val = -0.5 * (kc.logdet - np.sum(np.log(s)) + m @ kinv_m + kinv_diag @ s - n)
    return float(val), {"m_bin": -kinv_m, "s_bin": 0.5 * (1.0 / s - kinv_diag)}


def _pair_terms(post: VariationalPosterior):
    """log N(m_k; m_l, S_k + S_l) and the per-pair solves, blockwise over j."""
    K, V, M = post.means.shape
    S = post.cov
    logN = np.zeros((K, K))
    Cinv = np.empty((K, K, V, M, M))
    Cinv_d = np.empty((K, K, V, M))
    for k in range(K):
        for l in range(k, K):
            for j in range(V):
                ch = cholesky(S[k, j] + S[l, j])
                d = post.means[k, j] - post.means[l, j]
                inv = ch.inverse()
                sol = inv @ d
                logN[k, l] += -0.5 * (M * LOG2PI + ch.logdet + d @ sol)
                Cinv[k, l, j] = Cinv[l, k, j] = inv
                Cinv_d[k, l, j] = sol
                Cinv_d[l, k, j] = -sol
            logN[l, k] = logN[k, l]
    return logN, Cinv, Cinv_d


def entropy_bound(post: VariationalPosterior):
    """Jensen lower bound on the mixture entropy and its natural gradients."""
    w = post.weights
    logN, Cinv, Cinv_d = _pair_terms(post)
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    logz = logsumexp(logw[None, :] + logN, axis=1)
    val = -float(np.sum(w * logz))
    r1 = np.exp(logN - logz[:, None])          # N_kl / z_k
    r2 = np.exp(logN - logz[None, :])          # N_kl / z_l
    coef = w[:, None] * w[None, :] * (r1 + r2)  # pi_k pi_l (...)
    g_means = np.einsum("kl,kljm->kjm", coef, Cinv_d)
    outer = np.einsum("kljm,kljn->kljmn", Cinv_d, Cinv_d)
    g_cov = 0.5 * np.einsum("kl,kljmn->kjmn", coef, Cinv - outer)
    g_w = -logz - r2 @ w
    return val, {"weights": g_w, "means": g_means, "cov": g_cov}


def cross_entropy(post: VariationalPosterior, ind: InducingSet):
    """``E_q[log p(u)]`` in closed form and its natural gradients."""
    K, V, M = post.means.shape
    if ind.M != M or ind.V != V:
        raise ValueError("posterior and inducing set disagree on M or V")
    w = post.weights
    S = post.cov
    c = np.empty((K, V))
    g_means = np.empty((K, V, M))
    g_cov = np.empty((K, V, M, M))
    for j in range(V):
        ch = ind.chol(j)
        kinv = ch.inverse()
        for k in range(K):
            km = kinv @ post.means[k, j]
            c[k, j] = M * LOG2PI + ch.logdet + post.means[k, j] @ km + np.sum(kinv * S[k, j])
            g_means[k, j] = -w[k] * km
            g_cov[k, j] = -0.5 * w[k] * kinv
    val = -0.5 * float(np.sum(w[:, None] * c))
    return val, {"weights": -0.5 * c.sum(axis=1), "means": g_means, "cov": g_cov}


def kl_total(post: VariationalPosterior, ind: InducingSet):
    """Sum of the (negative) KL contributions and its raw-coordinate gradient."""
    ent, g_ent = entropy_bound(post)
    cross, g_cross = cross_entropy(post, ind)
    pw, g_pw = kl_pairwise(post)
    nat = {key: g_ent[key] + g_cross[key] for key in ("weights", "means", "cov")}
    nat.update(g_pw)
    return ent + cross + pw, natural_to_raw(post, nat)


def cross_entropy_hyper_grad(post: VariationalPosterior, ind: InducingSet, Zgrads: dict):
    """Gradient of the cross-entropy term wrt the log kernel hyperparameters.

    ``Zgrads`` maps each distinct KernelSpec to ``gram_grad(spec, Z, square=True)``.
    Processes sharing a spec contribute to the same hyperparameter vector.
    """
    w = post.weights
    S = post.cov
    out = {spec: np.zeros(len(dK)) for spec, dK in Zgrads.items()}
    for j, spec in enumerate(ind.specs):
        kinv = ind.chol(j).inverse()
        dKs = Zgrads[spec]
        for k in range(post.K):
            a = kinv @ post.means[k, j]
            B = kinv @ S[k, j] @ kinv
            for p, dK in enumerate(dKs):
                out[spec][p] += -0.5 * w[k] * (np.sum(kinv * dK) - a @ dK @ a - np.sum(B * dK))
    return out
