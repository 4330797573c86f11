import numpy as np
import pytest
from types import SimpleNamespace

from gpchain import oracles, posterior
from gpchain.chain import log_likelihood
from gpchain.estimator import (EstimationError, MCConfig, apply_control_variates, estimate_ell,
                               grad_ell, projections)
from gpchain.kernels import KernelSpec
from gpchain.posterior import InducingSet, VariationalPosterior, build_marginal

from conftest import make_desk


def quadrature_instance():
    """One token, two labels, unit-variance independent unaries."""
    Z = np.array([[0.0]])
    ind = InducingSet.shared(Z, KernelSpec(jitter=0.0), 2)
    post = VariationalPosterior.from_moments([1.0], np.array([[[0.3], [-0.2]]]),
                                             np.ones((1, 2, 1, 1)), np.zeros(4), np.ones(4))
    data = SimpleNamespace(X=[Z], y=[np.array([0])])
    return post, ind, data


def test_apply_control_variates_hand_example():
    g = np.array([1.0, 2.0, 3.0, 4.0])[:, None]
    h = np.array([-1.0, 0.0, 1.0, 0.0])[:, None]
    assert apply_control_variates(g, h, [0, 1])[0] == pytest.approx(3.0)


def test_control_variates_perfect_correlation():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(1000, 3))
    g = 3.0 * h
    out = apply_control_variates(g, h, slice(0, 100))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_control_variates_zero_variance_forces_zero_coefficient():
    g = np.arange(10.0)[:, None]
    h = np.zeros((10, 1))
    assert apply_control_variates(g, h, slice(0, 2))[0] == pytest.approx(np.mean(g[2:]))


def test_control_variates_independent_h_keeps_variance():
    rng = np.random.default_rng(1)
    plain, corrected = [], []
    for _ in range(100):
        g, h = rng.normal(size=(400, 1)), rng.normal(size=(400, 1))
        plain.append(g[40:].mean())
        corrected.append(apply_control_variates(g, h, slice(0, 40))[0])
    assert np.var(corrected) == pytest.approx(np.var(plain), rel=0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        MCConfig(samples=1)
    with pytest.raises(ValueError):
        MCConfig(samples=10, cv_holdout=0.0)
    MCConfig(samples=1, control_variates=False)


def test_estimate_matches_quadrature():
    post, ind, data = quadrature_instance()
    marg = build_marginal(post, ind, data.X[0])
    ref = oracles.quadrature_ell(marg, data.y[0])
    est = estimate_ell(post, ind, data, MCConfig(samples=50_000, seed=3))
    assert abs(est.value - ref) < 3 * est.stderr


def test_quadrature_self_convergence():
    post, ind, data = quadrature_instance()
    marg = build_marginal(post, ind, data.X[0])
    assert oracles.quadrature_ell(marg, [0], nodes=20) == pytest.approx(
        oracles.quadrature_ell(marg, [0], nodes=40), abs=1e-8)


def test_degenerate_covariance_gives_plug_in_value(desk):
    data, state = desk
    post = state.post
    Z = np.vstack(data.X)  # inducing at every token: no conditional variance left
    ind = InducingSet.shared(Z, KernelSpec(jitter=0.0), 2)
    tiny = VariationalPosterior.from_moments([1.0], np.random.default_rng(0).normal(size=(1, 2, 4)),
                                             np.broadcast_to(1e-14 * np.eye(4), (1, 2, 4, 4)),
                                             post.m_bin, np.full(4, 1e-14))
    est = estimate_ell(tiny, ind, data, MCConfig(samples=50, control_variates=False))
    ref = 0.0
    for n in range(2):
        marg = build_marginal(tiny, ind, data.X[n])
        ref += log_likelihood(data.y[n], marg.mean[0].T, tiny.m_bin.reshape(2, 2))
    assert est.value == pytest.approx(ref, abs=1e-6)


def test_per_sequence_decomposability(desk):
    data, state = desk
    cfg = MCConfig(samples=500, seed=7)
    full = grad_ell(state.post, state.ind, data, cfg)
    parts = [grad_ell(state.post, state.ind, data, cfg, subset=[n]) for n in range(2)]
    for n in range(2):
        assert full.per_sequence[n] == parts[n].per_sequence[0]
    assert full.value == pytest.approx(sum(p.value for p in parts), abs=1e-12)
    for key in full.grad:
        np.testing.assert_allclose(full.grad[key], parts[0].grad[key] + parts[1].grad[key],
                                   rtol=0, atol=1e-12)
    assert full.value == pytest.approx(full.per_sequence.sum(), abs=1e-12)


def test_thread_count_does_not_change_results():
    data, state = make_desk(K=2)
    runs = [grad_ell(state.post, state.ind, data, MCConfig(samples=300, seed=1, threads=t))
            for t in (1, 4)]
    assert runs[0].value == runs[1].value
    for key in runs[0].grad:
        np.testing.assert_array_equal(runs[0].grad[key], runs[1].grad[key])


def test_gradient_matches_likelihood_ratio_finite_differences(desk):
    data, state = desk
    post = state.post
    cfg = MCConfig(samples=20_000, seed=5, control_variates=False)
    g = post.pack(grad_ell(post, state.ind, data, cfg).grad)
    proj = projections(state.ind, data.X)
    fd = oracles.fd_gradient(lambda v: estimate_ell(post.from_vector(v), state.ind, data, cfg,
                                                    proj=proj, proposal=post).value,
                             post.to_vector())
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())


def test_mixture_gradient_matches_finite_differences():
    data, state = make_desk(K=2, seed=2)
    post = state.post
    cfg = MCConfig(samples=5000, seed=2, control_variates=False)
    g = post.pack(grad_ell(post, state.ind, data, cfg).grad)
    fd = oracles.fd_gradient(lambda v: estimate_ell(post.from_vector(v), state.ind, data, cfg,
                                                    proposal=post).value, post.to_vector())
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())


def test_constant_likelihood_gives_vanishing_gradient(desk):
    data, state = desk
    c = -7.25
    est = grad_ell(state.post, state.ind, data, MCConfig(samples=400, seed=0),
                   likelihood=lambda y, u, p: np.full(u.shape[0], c))
    post = state.post
    vec = post.pack(est.grad)
    sl = post.slices()
    for seg in ("means", "chol", "m_bin", "s_bin"):
        assert np.abs(vec[sl[seg]]).max() <= 1e-8 * abs(c)


def test_score_has_zero_mean(desk):
    data, state = desk
    est = grad_ell(state.post, state.ind, data, MCConfig(samples=100_000, seed=4, control_variates=False),
                   likelihood=lambda y, u, p: np.ones(u.shape[0]))
    vec = state.post.pack(est.grad)
    # per-coordinate scale of the score itself bounds the SE of its mean
    assert np.abs(vec).max() < 4 * 10 / np.sqrt(100_000)


def test_nonfinite_likelihood_reports_location(desk):
    data, state = desk

    def bad(y, u, p):
        out = np.zeros(u.shape[0])
        out[3] = np.nan
        return out

    with pytest.raises(EstimationError) as err:
        estimate_ell(state.post, state.ind, data, MCConfig(samples=10), likelihood=bad)
    assert err.value.where == (0, 0, 3)


def test_only_sequence_sized_draws(desk, monkeypatch):
    data, state = desk
    dims = []
    real_mvn, real_uni = posterior.mvn_draw, posterior.univariate_draw

    def mvn(mean, chol, eps):
        dims.append(chol.shape[-1])
        return real_mvn(mean, chol, eps)

    def uni(mean, var, eps):
        assert np.ndim(mean) == 1 and eps.shape[-1] == mean.shape[0]
        return real_uni(mean, var, eps)

    monkeypatch.setattr(posterior, "mvn_draw", mvn)
    monkeypatch.setattr(posterior, "univariate_draw", uni)
    grad_ell(state.post, state.ind, data, MCConfig(samples=20))
    assert dims and max(dims) <= max(len(y) for y in data.y)


def test_doubling_samples_shrinks_stderr(desk):
    data, state = desk
    se = {S: np.mean([estimate_ell(state.post, state.ind, data, MCConfig(samples=S, seed=s)).stderr
                      for s in range(10)]) for S in (1000, 2000)}
    assert se[2000] / se[1000] == pytest.approx(1 / np.sqrt(2), rel=0.1)
