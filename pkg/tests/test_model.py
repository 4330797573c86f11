import numpy as np
import pytest

from gpchain.data import ChainDataset, DataFormatError, synth_generate
from gpchain.estimator import MCConfig
from gpchain.kernels import KernelSpec
from gpchain.model import init_state, majority_error, predict, select_inducing, token_error
from gpchain.optim import TrainSchedule, train

from conftest import perturbed


def test_untrained_model_on_zero_features_is_uniform():
    data = ChainDataset([np.zeros((4, 3))], [np.array([0, 1, 2, 0])], ["a", "b", "c"], 3)
    state = init_state(data, 2, Z=np.random.default_rng(0).normal(size=(2, 3)))
    for mode in ("point", "sampled"):
        _, margs = predict(state, data, mode=mode, samples=50)
        if mode == "point":
            np.testing.assert_allclose(margs[0], 1 / 3, atol=1e-12)
        np.testing.assert_allclose(margs[0].sum(axis=1), 1.0, atol=1e-10)


def test_sampled_marginals_normalized(small_data):
    data, _ = small_data
    state = perturbed(init_state(data, 6, K=2), scale=0.5)
    paths, margs = predict(state, data, mode="sampled", samples=40)
    for p, m, y in zip(paths, margs, data.y):
        assert p.shape == y.shape
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-10)


def test_viterbi_decoding_shapes(small_data):
    data, _ = small_data
    state = perturbed(init_state(data, 6), scale=0.5)
    paths, _ = predict(state, data, decode="viterbi")
    assert [len(p) for p in paths] == [len(y) for y in data.y]


def test_feature_dimension_mismatch(small_data):
    data, _ = small_data
    state = init_state(data, 4)
    other = ChainDataset([np.zeros((2, 9))], [np.array([0, 1])], data.labels, 9)
    with pytest.raises(DataFormatError):
        predict(state, other)


def test_inducing_selection():
    X = np.random.default_rng(0).normal(size=(30, 3))
    Z = select_inducing(X, 5, seed=1)
    assert Z.shape == (5, 3)
    np.testing.assert_array_equal(Z, select_inducing(X, 5, seed=1))
    with pytest.raises(ValueError):
        select_inducing(X, 31)


def test_full_model_uses_every_token(small_data):
    data, _ = small_data
    state = init_state(data, 0, Z="all")
    assert state.ind.M == data.N


def test_error_helpers():
    assert token_error([[0, 1, 1]], [[0, 1, 0]]) == pytest.approx(1 / 3)
    train_ds = ChainDataset([np.zeros((3, 1))], [np.array([1, 1, 0])], ["a", "b"], 1)
    assert majority_error(train_ds, train_ds) == pytest.approx(1 / 3)


def test_sampled_mode_not_worse_than_point_mode():
    diffs = []
    spec = KernelSpec(lengthscales=(3.0,), variance=36.0)
    for seed in range(5):
        ds, _ = synth_generate(3, 5, 40, spec=spec, seed=seed)
        tr, te = ds.subset(range(20)), ds.subset(range(20, 40))
        state = init_state(tr, 20, spec=spec, seed=seed)
        sched = TrainSchedule(mode="stochastic", global_iters=2, unary_iters=150, pairwise_iters=50,
                              step_means=3e-3, step_cov=3e-4)
        best = train(state, tr, sched, MCConfig(samples=300, seed=seed)).state
        point = token_error(te.y, predict(best, te, mode="point")[0])
        sampled = token_error(te.y, predict(best, te, mode="sampled", samples=200, seed=seed)[0])
        diffs.append(sampled - point)
    assert np.mean(diffs) <= 0.02
