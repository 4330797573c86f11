import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from gpchain.data import (ChainDataset, DataFormatError, FeaturizerConfig, featurize, read_conll,
                          read_dataset, read_labels, read_native, synth_generate, write_labels,
                          write_native)
from gpchain.kernels import KernelSpec


def test_two_token_conll(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("He PRP B\nran VBD O\n\n")
    ds = read_conll(f)
    assert ds.n_seq == 1 and ds.N == 2 and ds.labels == ["B", "O"]
    assert ds.X[0].shape == (2, 2 ** 14)
    np.testing.assert_array_equal(ds.y[0], [0, 1])


def test_hashing_is_deterministic(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("a x B\nb y O\nc z O\n\nd x B\n")
    cfg = FeaturizerConfig(dim=64, window=1)
    one, two = read_conll(f, cfg), read_conll(f, cfg)
    for a, b in zip(one.X, two.X):
        assert (a != b).nnz == 0
    assert one.X[0][0].nnz > 2  # neighbor columns contribute features


def test_ragged_columns_rejected(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("a x B\nb O\n")
    with pytest.raises(DataFormatError, match="line 2"):
        read_conll(f)


def test_unknown_labels_counted(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("a B\nb Z\nc Z\n")
    ds = read_conll(f, labels=["O", "B"])
    assert ds.unknown_labels == 2
    np.testing.assert_array_equal(ds.y[0], [1, 0, 0])


def test_native_round_trip_is_idempotent(tmp_path, small_data):
    data, _ = small_data
    write_native(data, tmp_path / "one.txt")
    back = read_native(tmp_path / "one.txt")
    write_native(back, tmp_path / "two.txt")
    assert (tmp_path / "one.txt").read_bytes() == (tmp_path / "two.txt").read_bytes()
    for a, b in zip(data.X, back.X):
        np.testing.assert_array_equal(a, b)
    assert back.labels == data.labels
    assert read_dataset(tmp_path / "one.txt").N == data.N


def test_native_sparse_mode(tmp_path):
    ds = ChainDataset([sp.csr_matrix(np.eye(3, 5000))], [np.array([0, 1, 0])], ["x", "y"], 5000)
    write_native(ds, tmp_path / "s.txt")
    back = read_native(tmp_path / "s.txt")
    assert sp.issparse(back.X[0]) and (back.X[0] != ds.X[0]).nnz == 0


def test_native_rejects_bad_index(tmp_path):
    f = tmp_path / "n.txt"
    f.write_text("# gpchain-native dim=3\n# labels=A\nA\t7:1.0\n")
    with pytest.raises(DataFormatError):
        read_native(f)


def test_label_files_round_trip(tmp_path):
    seqs = [["B", "O"], ["O"]]
    write_labels(seqs, tmp_path / "l.txt")
    assert read_labels(tmp_path / "l.txt") == seqs


def test_dataset_invariants():
    with pytest.raises(DataFormatError):
        ChainDataset([np.zeros((2, 3))], [np.array([0, 2])], ["a", "b"], 3)
    with pytest.raises(DataFormatError):
        ChainDataset([np.zeros((2, 3))], [np.array([0])], ["a", "b"], 3)


@given(st.integers(2, 4), st.integers(1, 4), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_synth_output_is_valid(V, D, n, seed):
    data, lat = synth_generate(V, D, n, length_range=(1, 4), seed=seed)
    assert data.V == V and data.D == D and data.n_seq == n
    assert data.N == sum(len(u) for u in lat.unary)
    assert lat.pairwise.shape == (V, V)


def test_synth_reproducible():
    a, _ = synth_generate(3, 5, 10, seed=4)
    b, _ = synth_generate(3, 5, 10, seed=4)
    for x, y in zip(a.X + a.y, b.X + b.y):
        np.testing.assert_array_equal(x, y)


def test_synth_uniform_labels_without_signal():
    data, _ = synth_generate(2, 1, 400, length_range=(5, 5), spec=None, pairwise=False, seed=0)
    freq = np.mean(np.concatenate(data.y) == 0)
    assert 0.45 <= freq <= 0.55


def test_synth_unary_prior_variance():
    # a single token per dataset, so the draws across seeds are independent
    f = [synth_generate(2, 2, 1, length_range=(1, 1), spec=KernelSpec(variance=4.0), seed=s)[1].unary[0]
         for s in range(2000)]
    assert np.var(np.concatenate(f)) == pytest.approx(4.0, rel=0.1)
