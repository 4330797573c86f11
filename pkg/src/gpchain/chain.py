"""Linear-chain structured softmax: partition function, likelihoods, decoding.

Unary scores have shape ``(..., T, V)`` and pairwise scores ``(..., V, V)``;
leading axes broadcast, so a stack of Monte-Carlo draws is scored in one
call. ``pairwise[a, b]`` scores the transition ``a -> b``.

The estimator only ever sees a likelihood through the callback signature
``likelihood(y, unary, pairwise) -> log-probability``; both
:func:`log_likelihood` and :func:`pseudo_log_likelihood` satisfy it.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


def _validate(unary, pairwise):
    unary = np.asarray(unary, dtype=float)
    pairwise = np.asarray(pairwise, dtype=float)
    if unary.ndim < 2 or pairwise.ndim < 2:
        raise ValueError("unary must be (..., T, V) and pairwise (..., V, V)")
    V = unary.shape[-1]
    if pairwise.shape[-2:] != (V, V):
        raise ValueError(f"pairwise shape {pairwise.shape[-2:]} does not match V={V}")
    if unary.shape[-2] < 1:
        raise ValueError("sequence must have at least one token")
    return unary, pairwise


def _labels(y, T, V):
    y = np.asarray(y, dtype=np.intp)
    if y.shape != (T,):
        raise ValueError(f"label sequence has length {y.shape}, expected {T}")
    if y.size and (y.min() < 0 or y.max() >= V):
        raise ValueError("label index out of range")
    return y


def forward(unary, pairwise):
    """Log-space forward messages, shape ``(..., T, V)``."""
    unary, pairwise = _validate(unary, pairwise)
    T = unary.shape[-2]
    alphas = [unary[..., 0, :]]
    for t in range(1, T):
        prev = alphas[-1][..., :, None] + pairwise
        alphas.append(unary[..., t, :] + logsumexp(prev, axis=-2))
    return np.stack(alphas, axis=-2)


def backward(unary, pairwise):
    """Log-space backward messages, shape ``(..., T, V)``; last row is zero."""
    unary, pairwise = _validate(unary, pairwise)
    T = unary.shape[-2]
    shape = np.broadcast_shapes(unary.shape[:-2], pairwise.shape[:-2]) + (unary.shape[-1],)
    betas = [np.zeros(shape)]
    for t in range(T - 2, -1, -1):
        nxt = (unary[..., t + 1, :] + betas[-1])[..., None, :] + pairwise
        betas.append(logsumexp(nxt, axis=-1))
    return np.stack(betas[::-1], axis=-2)


def log_partition(unary, pairwise):
    """Log normalizer over all ``V**T`` label sequences, O(T V^2)."""
    return logsumexp(forward(unary, pairwise)[..., -1, :], axis=-1)


def sequence_score(y, unary, pairwise):
    """Unnormalized log-score of label sequence ``y``."""
    unary, pairwise = _validate(unary, pairwise)
    T, V = unary.shape[-2:]
    y = _labels(y, T, V)
    s = unary[..., np.arange(T), y].sum(axis=-1)
    if T > 1:
        s = s + pairwise[..., y[:-1], y[1:]].sum(axis=-1)
    return s


def log_likelihood(y, unary, pairwise):
    """Exact log p(y | unary, pairwise) under the chain structured softmax."""
    return sequence_score(y, unary, pairwise) - log_partition(unary, pairwise)


def pseudo_log_likelihood(y, unary, pairwise):
    """Piecewise pseudo log-likelihood: each factor normalized on its own.

    Unary factors normalize over the V labels of their token; every
    transition factor normalizes over all V^2 label pairs.
    """
    unary, pairwise = _validate(unary, pairwise)
    T, V = unary.shape[-2:]
    y = _labels(y, T, V)
    val = (unary[..., np.arange(T), y] - logsumexp(unary, axis=-1)).sum(axis=-1)
    if T > 1:
        flat = pairwise.reshape(pairwise.shape[:-2] + (V * V,))
        val = val + pairwise[..., y[:-1], y[1:]].sum(axis=-1) - (T - 1) * logsumexp(flat, axis=-1)
    return val


LIKELIHOODS = {"exact": log_likelihood, "pseudo": pseudo_log_likelihood}


def get_likelihood(name):
    """Look up a likelihood callback by name (``exact`` or ``pseudo``)."""
    if callable(name):
        return name
    try:
        return LIKELIHOODS[name]
    except KeyError:
        raise ValueError(f"unknown likelihood {name!r}; choose from {sorted(LIKELIHOODS)}")


def node_marginals(unary, pairwise):
    """Posterior marginals ``p(y_t = j)`` by forward-backward, shape ``(..., T, V)``."""
    a = forward(unary, pairwise)
    b = backward(unary, pairwise)
    logz = logsumexp(a[..., -1, :], axis=-1)
    return np.exp(a + b - logz[..., None, None])


def viterbi(unary, pairwise) -> np.ndarray:
    """Highest-scoring label sequence; ties go to the lowest label index."""
    unary, pairwise = _validate(unary, pairwise)
    if unary.ndim != 2 or pairwise.ndim != 2:
        raise ValueError("viterbi decodes a single sequence")
    T, V = unary.shape
    delta = unary[0].copy()
    back = np.zeros((T, V), dtype=np.intp)
    for t in range(1, T):
        cand = delta[:, None] + pairwise
        back[t] = np.argmax(cand, axis=0)
        delta = unary[t] + cand[back[t], np.arange(V)]
    path = np.empty(T, dtype=np.intp)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def marginal_decode(unary, pairwise) -> np.ndarray:
    """Per-token argmax of the node marginals (lowest index on ties)."""
    return np.argmax(node_marginals(unary, pairwise), axis=-1)


def sample_sequence(unary, pairwise, rng: np.random.Generator) -> np.ndarray:
    """Draw one label sequence exactly by forward filtering, backward sampling."""
    unary, pairwise = _validate(unary, pairwise)
    T, V = unary.shape
    alpha = forward(unary, pairwise)
    y = np.empty(T, dtype=np.intp)
    logp = alpha[-1] - logsumexp(alpha[-1])
    y[-1] = rng.choice(V, p=np.exp(logp))
    for t in range(T - 2, -1, -1):
        w = alpha[t] + pairwise[:, y[t + 1]]
        y[t] = rng.choice(V, p=np.exp(w - logsumexp(w)))
    return y
