"""Model state, initialization and prediction."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from sklearn.cluster import kmeans_plusplus

from .chain import node_marginals, viterbi
from .data import DataFormatError
from .estimator import PREDICT, projections, stream
from .kernels import KernelSpec
from .posterior import InducingSet, VariationalPosterior, build_marginal, project, sample_latents


@dataclass
class ModelState:
    ind: InducingSet
    post: VariationalPosterior
    labels: list

    @property
    def spec(self) -> KernelSpec:
        specs = set(self.ind.specs)
        if len(specs) != 1:
            raise ValueError("model uses per-process kernels; no single shared spec")
        return self.ind.specs[0]

    def with_post(self, post) -> "ModelState":
        return replace(self, post=post)


def select_inducing(X, M: int, seed: int = 0) -> np.ndarray:
    """k-means++ seeding over token feature rows (dense result)."""
    n = X.shape[0]
    if M > n:
        raise ValueError(f"cannot pick {M} inducing points from {n} tokens")
    centers, _ = kmeans_plusplus(X if sp.issparse(X) else np.asarray(X, dtype=float), M,
                                 random_state=seed)
    return centers.toarray() if sp.issparse(centers) else np.asarray(centers, dtype=float)


def init_state(data, M: int, K: int = 1, spec: KernelSpec = KernelSpec(), seed: int = 0,
               cov_scale: float = 0.1, diagonal: bool = False, Z=None) -> ModelState:
    """Seed inducing inputs and set the default initial posterior.

    ``Z="all"`` uses every training token as an inducing input, which
    recovers the full (non-sparse) model.
    """
    X = data.stacked_features()
    if isinstance(Z, str) and Z == "all":
        Z = X.toarray() if sp.issparse(X) else np.asarray(X)
    elif Z is None:
        Z = select_inducing(X, M, seed)
    ind = InducingSet.shared(Z, spec, data.V)
    post = VariationalPosterior.initial(K, data.V, ind.M, np.random.default_rng([seed, 7]),
                                        cov_scale=cov_scale, diagonal=diagonal)
    return ModelState(ind, post, list(data.labels))


def _check_dim(state: ModelState, data):
    if data.D != state.ind.D:
        raise DataFormatError(f"feature dimension {data.D} does not match the model's {state.ind.D}")


def predict(state: ModelState, data, decode: str = "marginal", mode: str = "point",
            samples: int = 100, seed: int = 0):
    """Decode each sequence; returns (label-index arrays, node-marginal arrays).

    ``point`` scores the mixture-mean latents; ``sampled`` averages node
    marginals over latent draws from every component, weighted by the
    mixture weights. Viterbi always decodes the mean scores.
    """
    if decode not in ("marginal", "viterbi") or mode not in ("point", "sampled"):
        raise ValueError("decode must be marginal|viterbi and mode point|sampled")
    _check_dim(state, data)
    post = state.post
    w = post.weights
    V = post.V
    pairwise = post.m_bin.reshape(V, V)
    paths, margs = [], []
    for n, Xn in enumerate(data.X):
        marg = build_marginal(post, state.ind, proj=project(state.ind, Xn))
        unary = np.einsum("k,kjt->tj", w, marg.mean)
        if mode == "point":
            probs = node_marginals(unary, pairwise)
        else:
            probs = np.zeros((Xn.shape[0], V))
            for k in range(post.K):
                f, p = sample_latents(marg, k, stream(seed, PREDICT, 0, n, k), size=samples)
                probs += w[k] * node_marginals(f, p).mean(axis=0)
        margs.append(probs)
        paths.append(viterbi(unary, pairwise) if decode == "viterbi" else np.argmax(probs, axis=1))
    return paths, margs


def token_error(gold, pred) -> float:
    g = np.concatenate([np.asarray(v) for v in gold])
    p = np.concatenate([np.asarray(v) for v in pred])
    if g.shape != p.shape:
        raise ValueError("gold and predicted sequences are misaligned")
    return float(np.mean(g != p))


def majority_error(train, test) -> float:
    top = int(np.argmax(train.label_counts()))
    return token_error(test.y, [np.full(len(v), top) for v in test.y])


__all__ = ["ModelState", "init_state", "predict", "select_inducing", "token_error",
           "majority_error", "projections"]
