"""Covariance functions over token feature vectors.

Feature matrices may be dense arrays or ``scipy.sparse`` matrices (the hashed
CoNLL features are sparse); every Gram matrix produced here is dense.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack, solve_triangular

FAMILIES = ("squared-exponential", "linear")


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization failed; ``pivot`` is the 0-based failing index."""

    def __init__(self, pivot: int, jitter: float):
        self.pivot = pivot
        self.jitter = jitter
        super().__init__(f"matrix not positive definite at pivot {pivot} (jitter {jitter:.3g})")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters.

    ``lengthscales`` holds a single value when the kernel is isotropic and one
    value per feature dimension otherwise (ARD). ``jitter=None`` means
    ``1e-6 * variance``.
    """

    family: str = "squared-exponential"
    lengthscales: tuple = (1.0,)
    variance: float = 1.0
    jitter: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if not ls or min(ls) <= 0 or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be positive")
        if not self.variance > 0:
            raise ValueError("signal variance must be positive")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    @property
    def isotropic(self) -> bool:
        return len(self.lengthscales) == 1

    @property
    def diag_jitter(self) -> float:
        return 1e-6 * self.variance if self.jitter is None else float(self.jitter)

    # log-parameterization used by the hyperparameter optimizer
    def log_params(self) -> np.ndarray:
        return np.log(np.concatenate([[self.variance], self.lengthscales]))

    def with_log_params(self, theta: np.ndarray) -> "KernelSpec":
        theta = np.asarray(theta, dtype=float)
        return replace(self, variance=float(np.exp(theta[0])),
                       lengthscales=tuple(np.exp(theta[1:])))


def _check(spec: KernelSpec, A):
    if A.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    if not spec.isotropic and A.shape[1] != len(spec.lengthscales):
        raise ValueError(f"feature dimension {A.shape[1]} does not match "
                         f"{len(spec.lengthscales)} lengthscales")
    data = A.data if sp.issparse(A) else A
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite feature values")


def _scaled(spec: KernelSpec, A):
    inv = 1.0 / np.asarray(spec.lengthscales)
    if sp.issparse(A):
        A = sp.csr_matrix(A, dtype=float)
        return A * inv[0] if spec.isotropic else A @ sp.diags(inv)
    A = np.asarray(A, dtype=float)
    return A * inv if not spec.isotropic else A * inv[0]


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M)


def _rowsq(A):
    if sp.issparse(A):
        return np.asarray(A.multiply(A).sum(axis=1)).ravel()
    return np.einsum("ij,ij->i", A, A)


def _inner(A, B):
    return _dense(A @ B.T)


def gram(spec: KernelSpec, A, B=None, square: bool = False) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(a_i, b_j)``.

    ``B=None`` evaluates A against itself. ``square=True`` (only valid when
    the two sets coincide) adds ``spec.jitter`` to the diagonal.
    """
    _check(spec, A)
    same = B is None
    if not same:
        _check(spec, B)
        if A.shape[1] != B.shape[1]:
            raise ValueError("feature dimensions differ")
    if square and not same:
        raise ValueError("square=True requires B to be omitted")
    As = _scaled(spec, A)
    Bs = As if same else _scaled(spec, B)
    if spec.family == "linear":
        K = spec.variance * _inner(As, Bs)
    else:
        d2 = _rowsq(As)[:, None] + _rowsq(Bs)[None, :] - 2.0 * _inner(As, Bs)
        np.maximum(d2, 0.0, out=d2)
        if same:
            np.fill_diagonal(d2, 0.0)
        K = spec.variance * np.exp(-0.5 * d2)
    if same:
        K = 0.5 * (K + K.T)
        if square:
            K[np.diag_indices_from(K)] += spec.diag_jitter
    return K


def gram_diag(spec: KernelSpec, A, square: bool = False) -> np.ndarray:
    """Diagonal of ``gram(spec, A, square=square)`` without the full matrix."""
    _check(spec, A)
    if spec.family == "linear":
        d = spec.variance * _rowsq(_scaled(spec, A))
    else:
        d = np.full(A.shape[0], spec.variance)
    return d + spec.diag_jitter if square else d


def gram_grad(spec: KernelSpec, A, B=None, square: bool = False) -> np.ndarray:
    """Derivatives of the Gram matrix wrt ``spec.log_params()``.

    Returns an array of shape ``(P, n_a, n_b)``. The default jitter scales
    with the variance, so it is carried along in the log-variance slice.
    """
    Kn = gram(spec, A, B)
    dvar = Kn.copy()
    if square and spec.jitter is None:
        dvar[np.diag_indices_from(dvar)] += spec.diag_jitter
    out = [dvar]
    ls = np.asarray(spec.lengthscales)
    if spec.isotropic:
        if spec.family == "linear":
            out.append(-2.0 * Kn)
        else:
            Bm = A if B is None else B
            d2 = (_rowsq(A)[:, None] + _rowsq(Bm)[None, :] - 2.0 * _inner(A, Bm)) / ls[0] ** 2
            np.maximum(d2, 0.0, out=d2)
            if B is None:
                np.fill_diagonal(d2, 0.0)
            out.append(Kn * d2)
        return np.stack(out)
    Ad = _dense(A).astype(float)
    Bd = Ad if B is None else _dense(B).astype(float)
    for d in range(len(ls)):
        if spec.family == "linear":
            # k = s sum_d a_d b_d / l_d^2, so dk/dlog l_d = -2 s a_d b_d / l_d^2
            out.append(-2.0 * spec.variance * np.outer(Ad[:, d], Bd[:, d]) / ls[d] ** 2)
        else:
            diff2 = (Ad[:, d][:, None] - Bd[:, d][None, :]) ** 2 / ls[d] ** 2
            out.append(Kn * diff2)
    return np.stack(out)


@dataclass
class Cholesky:
    """Lower Cholesky factor of a symmetric PD matrix plus its log-determinant."""

    L: np.ndarray
    jitter_added: float = 0.0
    logdet: float = field(init=False)

    def __post_init__(self):
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, B: np.ndarray) -> np.ndarray:
        y = solve_triangular(self.L, B, lower=True, check_finite=False)
        return solve_triangular(self.L, y, lower=True, trans="T", check_finite=False)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.L.shape[0]))

    @property
    def matrix(self) -> np.ndarray:
        return self.L @ self.L.T


def _potrf(K: np.ndarray):
    c, info = lapack.dpotrf(K, lower=1, clean=1)
    return np.tril(c), info


def cholesky(K: np.ndarray, retry_jitter: Optional[float] = None) -> Cholesky:
    """Factor ``K``; on failure add ``retry_jitter`` to the diagonal once.

    Raises NotPositiveDefiniteError carrying the failing pivot index.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("cholesky needs a square matrix")
    L, info = _potrf(K)
    if info == 0:
        return Cholesky(L)
    if retry_jitter:
        L, info2 = _potrf(K + retry_jitter * np.eye(K.shape[0]))
        if info2 == 0:
            return Cholesky(L, jitter_added=retry_jitter)
        raise NotPositiveDefiniteError(info2 - 1, retry_jitter)
    raise NotPositiveDefiniteError(info - 1, 0.0)


def factor_gram(spec: KernelSpec, A) -> Cholesky:
    """Jittered Gram of A with itself, factored with the standard retry."""
    return cholesky(gram(spec, A, square=True), retry_jitter=1e-4 * spec.variance)


def chol_solve(K: np.ndarray, B: np.ndarray):
    """Return ``(K^{-1} B, log det K)`` via a Cholesky factorization of K."""
    ch = cholesky(K)
    return ch.solve(np.asarray(B, dtype=float)), ch.logdet


def smallest_pivot(K: np.ndarray) -> float:
    return float(np.min(np.diag(cholesky(K).L)))


def as_specs(spec, V: int) -> tuple:
    """Broadcast one spec (shared) or validate a per-process sequence of V specs."""
    if isinstance(spec, KernelSpec):
        return (spec,) * V
    specs = tuple(spec)
    if len(specs) != V:
        raise ValueError(f"expected {V} kernel specs, got {len(specs)}")
    return specs


def unique_specs(specs: Sequence[KernelSpec]) -> list:
    out = []
    for s in specs:
        if s not in out:
            out.append(s)
    return out
