"""Training loops: block-coordinate batch ascent and SGD with SAGA.

Both loops alternate over parameter blocks (unary variational parameters,
pairwise variational parameters, kernel hyperparameters), evaluate the
ELBO at the end of each global iteration with a fixed evaluation stream,
and keep the best snapshot seen.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .estimator import (EVALUATE, HYPER, TRAIN, EstimationError, MCConfig, estimate_ell, grad_ell,
                        projections)
from .kernels import NotPositiveDefiniteError, gram_grad
from .model import ModelState
from .posterior import InducingSet, cross_entropy_hyper_grad, kl_total

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iteration", "step", "block", "elbo", "elbo_after", "kl", "ell", "grad_norm",
                "best_elbo", "accepted", "elapsed_seconds")
UNARY, PAIRWISE, HYPERS = "unary", "pairwise", "hyper"
BLOCK_SEGMENTS = {UNARY: ("logits", "means", "chol"), PAIRWISE: ("m_bin", "s_bin")}

# (global, unary, pairwise, hyper)
_DEFAULT_ITERS = {"batch": (10, 50, 10, 5), "stochastic": (1, 3000, 1000, 0)}


@dataclass
class TrainSchedule:
    """Optimization schedule; ``None`` iteration counts take the mode defaults."""

    mode: str = "batch"
    global_iters: Optional[int] = None
    unary_iters: Optional[int] = None
    pairwise_iters: Optional[int] = None
    hyper_iters: Optional[int] = None
    step_means: float = 1e-4
    step_cov: float = 1e-5
    step_weights: Optional[float] = None
    step_pairwise_mean: Optional[float] = None
    step_pairwise_cov: Optional[float] = None
    step_hyper: float = 1e-3
    hyper_probe: float = 1e-4
    obj_tol: float = 1e-5
    mean_tol: float = 1e-3
    budget_seconds: float = math.inf
    batch_size: int = 1
    line_search: bool = False
    trace_every: int = 100

    def __post_init__(self):
        if self.mode not in _DEFAULT_ITERS:
            raise ValueError(f"mode must be batch or stochastic, got {self.mode!r}")
        g, u, p, h = _DEFAULT_ITERS[self.mode]
        self.global_iters = g if self.global_iters is None else self.global_iters
        self.unary_iters = u if self.unary_iters is None else self.unary_iters
        self.pairwise_iters = p if self.pairwise_iters is None else self.pairwise_iters
        self.hyper_iters = h if self.hyper_iters is None else self.hyper_iters
        if self.mode == "stochastic" and self.hyper_iters:
            raise ValueError("hyperparameters are held fixed in stochastic mode")
        if min(self.global_iters, self.unary_iters, self.pairwise_iters, self.hyper_iters) < 0:
            raise ValueError("iteration counts must be non-negative")
        for name in ("step_means", "step_cov", "step_hyper", "budget_seconds"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def steps(self) -> dict:
        return {"logits": self.step_weights or self.step_means,
                "means": self.step_means, "chol": self.step_cov,
                "m_bin": self.step_pairwise_mean or self.step_means,
                "s_bin": self.step_pairwise_cov or self.step_cov}


class SagaTable:
    """Stored per-sequence gradients and their running average."""

    def __init__(self, n: int, dim: int):
        self.table = np.zeros((n, dim))
        self.avg = np.zeros(dim)
        self.visits = np.zeros(n, dtype=int)

    def direction(self, n: int, g: np.ndarray) -> np.ndarray:
        return g - self.table[n] + self.avg

    def update(self, n: int, g: np.ndarray) -> None:
        self.avg += (g - self.table[n]) / self.table.shape[0]
        self.table[n] = g
        self.visits[n] += 1

    def step(self, n: int, g: np.ndarray) -> np.ndarray:
        d = self.direction(n, g)
        self.update(n, g)
        return d

    def verify(self, atol: float = 1e-10) -> bool:
        return bool(np.allclose(self.avg, self.table.mean(axis=0), rtol=0.0, atol=atol))


@dataclass
class TrainResult:
    state: ModelState
    last: ModelState
    trace: list
    best_elbo: float
    status: str = "ok"
    steps: int = 0


class _Tracer:
    def __init__(self, sink: Optional[Callable], t0: float):
        self.rows = []
        self.sink = sink
        self.t0 = t0

    def __call__(self, **row):
        rec = {k: row.get(k, "") for k in TRACE_FIELDS}
        rec["elapsed_seconds"] = time.perf_counter() - self.t0
        self.rows.append(rec)
        if self.sink is not None:
            self.sink(rec)


def _mask(post, block) -> np.ndarray:
    sl = post.slices()
    m = np.zeros(post.size)
    for seg in BLOCK_SEGMENTS[block]:
        m[sl[seg]] = 1.0
    return m


def _step_vector(post, sched: TrainSchedule) -> np.ndarray:
    sl = post.slices()
    v = np.zeros(post.size)
    for seg, eta in sched.steps().items():
        v[sl[seg]] = eta
    return v


def evaluate_elbo(state: ModelState, data, mc: MCConfig, likelihood, proj=None, epoch: int = 0,
                  purpose: int = EVALUATE):
    """(elbo, kl, ell) with the ELL drawn from the given stream namespace."""
    kl, _ = kl_total(state.post, state.ind)
    ell = estimate_ell(state.post, state.ind, data, mc, likelihood, epoch=epoch,
                       purpose=purpose, proj=proj).value
    return kl + ell, kl, ell


def hyper_gradient(state: ModelState, data, mc: MCConfig, likelihood="exact", proj=None,
                   epoch: int = 0, probe: float = 1e-4):
    """Gradient of the ELBO wrt the log kernel hyperparameters.

    The KL part is analytic (Gram-derivative chain rule); the expected
    log-likelihood part is a central difference with common random numbers
    on both sides, since no closed form exists for it.
    """
    spec = state.spec
    ind = state.ind
    dK = gram_grad(spec, ind.Z, square=True)
    g = cross_entropy_hyper_grad(state.post, ind, {spec: dK})[spec]
    theta = spec.log_params()

    def ell_at(th):
        ind2 = InducingSet.shared(ind.Z, spec.with_log_params(th), ind.V)
        return estimate_ell(state.post, ind2, data, mc, likelihood, epoch=epoch, purpose=HYPER,
                            proj=projections(ind2, data.X)).value

    for p in range(theta.size):
        h = probe
        for attempt in range(2):
            e = np.zeros_like(theta)
            e[p] = h
            try:
                g[p] += (ell_at(theta + e) - ell_at(theta - e)) / (2.0 * h)
                break
            except NotPositiveDefiniteError:
                if attempt == 1:
                    raise
                h *= 0.1
    return g


def _converged(sched, prev_elbo, elbo, prev_means, means) -> bool:
    if sched.mode != "batch" or prev_elbo is None:
        return False
    if abs(elbo - prev_elbo) < sched.obj_tol:
        return True
    return float(np.mean(np.abs(means - prev_means))) < sched.mean_tol


def _train(state: ModelState, data, sched: TrainSchedule, mc: MCConfig, likelihood,
           trace: Optional[Callable], saga: Optional[SagaTable] = None) -> TrainResult:
    t0 = time.perf_counter()
    tr = _Tracer(trace, t0)
    proj = projections(state.ind, data.X)
    N = data.n_seq
    best_state, best_elbo = state, -math.inf
    status, step = "ok", 0
    prev_elbo, prev_means = None, state.post.means.copy()
    batch_rng = np.random.default_rng(np.random.SeedSequence([mc.seed, 99]))
    stochastic = sched.mode == "stochastic"
    if stochastic and saga is None:
        saga = SagaTable(N, state.post.size)
    etas = _step_vector(state.post, sched)
    blocks = [(UNARY, sched.unary_iters), (PAIRWISE, sched.pairwise_iters)]
    if not stochastic:
        blocks.append((HYPERS, sched.hyper_iters))

    def out_of_time():
        return time.perf_counter() - t0 > sched.budget_seconds

    try:
        for it in range(sched.global_iters):
            for block, iters in blocks:
                for _ in range(iters):
                    if out_of_time():
                        status = "budget"
                        raise StopIteration
                    step += 1
                    if block == HYPERS:
                        g = hyper_gradient(state, data, mc, likelihood, proj, epoch=step,
                                           probe=sched.hyper_probe)
                        theta = state.spec.log_params() + sched.step_hyper * g
                        ind = InducingSet.shared(state.ind.Z, state.spec.with_log_params(theta), state.ind.V)
                        state = ModelState(ind, state.post, state.labels)
                        proj = projections(ind, data.X)
                        tr(iteration=it, step=step, block=block, grad_norm=float(np.linalg.norm(g)),
                           best_elbo=best_elbo, accepted=1)
                        continue
                    post = state.post
                    kl, klg = kl_total(post, state.ind)
                    klg = post.pack(klg)
                    if stochastic:
                        batch = batch_rng.choice(N, size=min(sched.batch_size, N), replace=False)
                        d = np.zeros(post.size)
                        ell_b = 0.0
                        for n in batch:
                            est = grad_ell(post, state.ind, data, mc, likelihood, subset=[n],
                                           epoch=step, proj=proj)
                            d += saga.step(int(n), post.pack(est.grad))
                            ell_b += est.value
                        direction = klg + N * d / len(batch)
                        ell = N * ell_b / len(batch)
                    else:
                        est = grad_ell(post, state.ind, data, mc, likelihood, epoch=step, proj=proj)
                        direction = klg + post.pack(est.grad)
                        ell = est.value
                    elbo = kl + ell
                    if not np.all(np.isfinite(direction)) or not math.isfinite(elbo):
                        raise EstimationError(-1, -1, -1)
                    delta = etas * _mask(post, block) * direction
                    vec = post.to_vector()
                    accepted, after = 1, ""
                    if not stochastic:
                        scale = 1.0
                        for _attempt in range(6 if sched.line_search else 1):
                            cand = post.from_vector(vec + scale * delta)
                            kl2, _ = kl_total(cand, state.ind)
                            after = kl2 + estimate_ell(cand, state.ind, data, mc, likelihood,
                                                       epoch=step, proj=proj).value
                            if not sched.line_search or after >= elbo:
                                break
                            scale *= 0.5
                        else:
                            accepted = 0
                        if accepted:
                            state = state.with_post(cand)
                    else:
                        state = state.with_post(post.from_vector(vec + delta))
                    if not stochastic or step % sched.trace_every == 0:
                        tr(iteration=it, step=step, block=block, elbo=elbo, elbo_after=after, kl=kl,
                           ell=ell, grad_norm=float(np.linalg.norm(direction * _mask(post, block))),
                           best_elbo=best_elbo, accepted=accepted)
            state.post.check()
            elbo, kl, ell = evaluate_elbo(state, data, mc, likelihood, proj)
            if not math.isfinite(elbo):
                raise EstimationError(-1, -1, -1)
            if elbo > best_elbo:
                best_state, best_elbo = state, elbo
            tr(iteration=it, step=step, block="eval", elbo=elbo, kl=kl, ell=ell,
               best_elbo=best_elbo, accepted=1)
            log.info("iteration %d: elbo %.4f (best %.4f)", it, elbo, best_elbo)
            if _converged(sched, prev_elbo, elbo, prev_means, state.post.means):
                status = "converged"
                break
            prev_elbo, prev_means = elbo, state.post.means.copy()
    except StopIteration:
        pass
    except (EstimationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numeric failure, keeping last good snapshot: %s", exc)
        status = "numeric-failure"
    if best_elbo == -math.inf:
        best_state = state if status != "numeric-failure" else best_state
    return TrainResult(best_state, state, tr.rows, best_elbo, status, step)


def train_batch(state: ModelState, data, sched: TrainSchedule, mc: MCConfig,
                likelihood="exact", trace: Optional[Callable] = None) -> TrainResult:
    """Full-data gradient ascent, one parameter block at a time."""
    if sched.mode != "batch":
        raise ValueError("train_batch needs a batch schedule")
    return _train(state, data, sched, mc, likelihood, trace)


def train_stochastic(state: ModelState, data, sched: TrainSchedule, mc: MCConfig,
                     likelihood="exact", trace: Optional[Callable] = None,
                     saga: Optional[SagaTable] = None) -> TrainResult:
    """Minibatch SGD on the ELBO with SAGA-corrected likelihood gradients."""
    if sched.mode != "stochastic":
        raise ValueError("train_stochastic needs a stochastic schedule")
    return _train(state, data, sched, mc, likelihood, trace, saga)


def train(state, data, sched, mc, likelihood="exact", trace=None) -> TrainResult:
    fn = train_batch if sched.mode == "batch" else train_stochastic
    return fn(state, data, sched, mc, likelihood, trace)
