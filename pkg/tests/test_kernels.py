import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gpchain.kernels import (KernelSpec, NotPositiveDefiniteError, chol_solve, cholesky,
                             factor_gram, gram, gram_diag, gram_grad)

finite = st.floats(-3, 3, allow_nan=False)


def test_se_matches_closed_form():
    spec = KernelSpec("squared-exponential", (2.0,), 3.0)
    a, b = np.array([[0.0, 1.0]]), np.array([[1.0, 3.0]])
    assert gram(spec, a, b)[0, 0] == pytest.approx(3.0 * np.exp(-0.5 * 5 / 4))


def test_linear_kernel_is_scaled_inner_product():
    spec = KernelSpec("linear", (1.0,), 2.0)
    A = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(gram(spec, A), 2.0 * A @ A.T)


def test_jitter_default_scales_with_variance():
    spec = KernelSpec(variance=5.0)
    X = np.zeros((2, 1))
    K = gram(spec, X, square=True)
    assert K[0, 0] == pytest.approx(5.0 + 5e-6)
    assert K[0, 1] == pytest.approx(5.0)


@given(arrays(float, (5, 3), elements=finite))
def test_gram_symmetric_psd(X):
    K = gram(KernelSpec(lengthscales=(1.3,)), X, square=True)
    np.testing.assert_array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() > 0


def test_sparse_and_dense_inputs_agree():
    rng = np.random.default_rng(0)
    X = (rng.random((6, 20)) < 0.2).astype(float)
    for spec in (KernelSpec(lengthscales=(1.5,)), KernelSpec("linear")):
        np.testing.assert_allclose(gram(spec, sp.csr_matrix(X)), gram(spec, X), atol=1e-12)
        np.testing.assert_allclose(gram_diag(spec, sp.csr_matrix(X)), np.diag(gram(spec, X)))


@pytest.mark.parametrize("ls", [(1.2,), (0.7, 1.9, 1.1)])
def test_gram_grad_matches_finite_differences(ls):
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))
    spec = KernelSpec(lengthscales=ls, variance=1.7)
    theta = spec.log_params()
    dK = gram_grad(spec, A, B)
    for p in range(theta.size):
        e = np.zeros_like(theta)
        e[p] = 1e-6
        fd = (gram(spec.with_log_params(theta + e), A, B)
              - gram(spec.with_log_params(theta - e), A, B)) / 2e-6
        np.testing.assert_allclose(dK[p], fd, rtol=1e-6, atol=1e-9)


def test_log_params_round_trip():
    spec = KernelSpec(lengthscales=(0.5, 2.0), variance=3.0)
    back = spec.with_log_params(spec.log_params())
    assert back.variance == pytest.approx(3.0)
    np.testing.assert_allclose(back.lengthscales, spec.lengthscales)


def test_cholesky_reports_pivot():
    K = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 1.0 - 1e-3]])
    with pytest.raises(NotPositiveDefiniteError) as err:
        cholesky(K)
    assert err.value.pivot == 2


def test_factor_gram_recovers_with_retry_jitter():
    X = np.zeros((4, 2))  # duplicate rows: rank one Gram
    spec = KernelSpec(jitter=0.0)
    ch = factor_gram(spec, X)
    assert ch.jitter_added > 0


def test_chol_solve_and_logdet():
    rng = np.random.default_rng(2)
    R = rng.normal(size=(4, 4))
    K = R @ R.T + 4 * np.eye(4)
    x, logdet = chol_solve(K, np.eye(4))
    np.testing.assert_allclose(x, np.linalg.inv(K), atol=1e-12)
    assert logdet == pytest.approx(np.linalg.slogdet(K)[1])


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        KernelSpec(family="matern")
    with pytest.raises(ValueError):
        KernelSpec(lengthscales=(-1.0,))
    with pytest.raises(ValueError):
        KernelSpec(variance=0.0)
