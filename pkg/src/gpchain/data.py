"""Chain datasets: CoNLL column files, a native sparse format, synthetic data.

Native format (UTF-8)::

    # gpchain-native dim=<D>
    # labels=<label_0> <label_1> ...
    <label>\t<idx>:<val> <idx>:<val> ...
    <label>\t...

    <label>\t...          (blank line separates sequences)

Feature values are written with ``repr`` so a read/write/read cycle is exact.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .chain import sample_sequence
from .kernels import KernelSpec, gram

log = logging.getLogger(__name__)

DENSE_MAX_DIM = 2048


class DataFormatError(ValueError):
    pass


@dataclass
class ChainDataset:
    X: list
    y: list
    labels: list
    D: int
    unknown_labels: int = 0

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise DataFormatError("features and labels disagree on the number of sequences")
        V = len(self.labels)
        for n, (Xn, yn) in enumerate(zip(self.X, self.y)):
            if Xn.shape[0] < 1 or Xn.shape[0] != len(yn):
                raise DataFormatError(f"sequence {n}: length mismatch or empty")
            if Xn.shape[1] != self.D:
                raise DataFormatError(f"sequence {n}: feature dimension {Xn.shape[1]} != {self.D}")
            if len(yn) and (np.min(yn) < 0 or np.max(yn) >= V):
                raise DataFormatError(f"sequence {n}: label index out of range")

    @property
    def V(self) -> int:
        return len(self.labels)

    @property
    def n_seq(self) -> int:
        return len(self.y)

    @property
    def N(self) -> int:
        return int(sum(len(v) for v in self.y))

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(v) for v in self.y])

    def subset(self, idx) -> "ChainDataset":
        idx = list(idx)
        return ChainDataset([self.X[i] for i in idx], [self.y[i] for i in idx],
                            list(self.labels), self.D)

    def stacked_features(self):
        if any(sp.issparse(x) for x in self.X):
            return sp.vstack([sp.csr_matrix(x) for x in self.X]).tocsr()
        return np.vstack(self.X)

    def label_counts(self) -> np.ndarray:
        return np.bincount(np.concatenate(self.y), minlength=self.V)


# CoNLL / CRF++ column files --------------------------------------------------

@dataclass(frozen=True)
class FeaturizerConfig:
    """Hash ``(window offset, column, value)`` triples into ``dim`` binary features.

    ``window=1`` adds the previous and next tokens' columns, ``window=0``
    uses the current token only. ``columns`` restricts which feature
    columns (0-based, excluding the label column) are used.
    """

    dim: int = 2 ** 14
    window: int = 0
    columns: Optional[tuple] = None


def _hash(key: str, dim: int) -> int:
    return zlib.crc32(key.encode("utf-8")) % dim


def featurize(tokens: Sequence[Sequence[str]], cfg: FeaturizerConfig) -> sp.csr_matrix:
    """Binary hashed features for one sequence of token column lists."""
    T = len(tokens)
    ncol = len(tokens[0])
    cols = range(ncol) if cfg.columns is None else cfg.columns
    rows, idx = [], []
    for t in range(T):
        seen = set()
        for off in range(-cfg.window, cfg.window + 1):
            s = t + off
            for c in cols:
                if s < 0:
                    val = "<s>"
                elif s >= T:
                    val = "</s>"
                else:
                    val = tokens[s][c]
                h = _hash(f"{off}|{c}|{val}", cfg.dim)
                if h not in seen:
                    seen.add(h)
                    rows.append(t)
                    idx.append(h)
    return sp.csr_matrix((np.ones(len(rows)), (rows, idx)), shape=(T, cfg.dim))


def _blocks(lines):
    block = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if line.strip() == "":
            if block:
                yield block
                block = []
            continue
        block.append((lineno, line))
    if block:
        yield block


def _label_index(lab, vocab, index, frozen, counter):
    if lab in index:
        return index[lab]
    if frozen:
        counter[0] += 1
        return 0
    index[lab] = len(vocab)
    vocab.append(lab)
    return index[lab]


def read_conll(path, featurizer: FeaturizerConfig = FeaturizerConfig(),
               labels: Optional[Sequence[str]] = None) -> ChainDataset:
    """Parse a whitespace-column file; the last column is the label.

    Labels are indexed by first appearance unless ``labels`` fixes the
    vocabulary, in which case unseen labels map to index 0 and are counted
    in ``unknown_labels``.
    """
    text = Path(path).read_text(encoding="utf-8")
    vocab = list(labels) if labels is not None else []
    index = {lab: i for i, lab in enumerate(vocab)}
    unknown = [0]
    X, Y = [], []
    ncol = None
    for block in _blocks(text.splitlines()):
        toks, ys = [], []
        for lineno, line in block:
            parts = line.split()
            if ncol is None:
                ncol = len(parts)
                if ncol < 2:
                    raise DataFormatError(f"line {lineno}: need at least one feature column and a label")
            elif len(parts) != ncol:
                raise DataFormatError(f"line {lineno}: expected {ncol} columns, found {len(parts)}")
            toks.append(parts[:-1])
            ys.append(_label_index(parts[-1], vocab, index, labels is not None, unknown))
        X.append(featurize(toks, featurizer))
        Y.append(np.array(ys, dtype=np.intp))
    if not Y:
        raise DataFormatError(f"{path}: no sequences found")
    if unknown[0]:
        log.warning("%d tokens had labels outside the vocabulary (mapped to %r)", unknown[0], vocab[0])
    return ChainDataset(X, Y, vocab, featurizer.dim, unknown[0])


# native sparse format ---------------------------------------------------------

def write_native(ds: ChainDataset, path) -> None:
    out = [f"# gpchain-native dim={ds.D}", "# labels=" + " ".join(ds.labels)]
    for Xn, yn in zip(ds.X, ds.y):
        Xc = sp.csr_matrix(Xn)
        for t in range(Xc.shape[0]):
            lo, hi = Xc.indptr[t], Xc.indptr[t + 1]
            feats = " ".join(f"{i}:{float(v)!r}" for i, v in zip(Xc.indices[lo:hi], Xc.data[lo:hi]))
            out.append(f"{ds.labels[yn[t]]}\t{feats}")
        out.append("")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_native(path, labels: Optional[Sequence[str]] = None, dense: Optional[bool] = None) -> ChainDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    dim, file_labels = None, None
    body = []
    for line in lines:
        if line.startswith("#"):
            head = line[1:].strip()
            if head.startswith("gpchain-native"):
                for tok in head.split()[1:]:
                    if tok.startswith("dim="):
                        dim = int(tok[4:])
            elif head.startswith("labels="):
                file_labels = head[len("labels="):].split()
            continue
        body.append(line)
    if dim is None:
        raise DataFormatError(f"{path}: missing '# gpchain-native dim=' header")
    vocab = list(labels) if labels is not None else list(file_labels or [])
    frozen = labels is not None
    index = {lab: i for i, lab in enumerate(vocab)}
    unknown = [0]
    dense = dim <= DENSE_MAX_DIM if dense is None else dense
    X, Y = [], []
    for block in _blocks(body):
        rows, cols, vals, ys = [], [], [], []
        for t, (lineno, line) in enumerate(block):
            lab, _, feats = line.partition("\t")
            ys.append(_label_index(lab.strip(), vocab, index, frozen, unknown))
            for item in feats.split():
                i, _, v = item.partition(":")
                try:
                    i, v = int(i), float(v)
                except ValueError:
                    raise DataFormatError(f"line {lineno}: bad feature {item!r}")
                if not 0 <= i < dim:
                    raise DataFormatError(f"line {lineno}: feature index {i} outside dim {dim}")
                rows.append(t)
                cols.append(i)
                vals.append(v)
        Xn = sp.csr_matrix((vals, (rows, cols)), shape=(len(block), dim))
        X.append(Xn.toarray() if dense else Xn)
        Y.append(np.array(ys, dtype=np.intp))
    if not Y:
        raise DataFormatError(f"{path}: no sequences found")
    return ChainDataset(X, Y, vocab, dim, unknown[0])


def read_labels(path) -> list:
    """Read a predicted-label file: one label per line, blank lines between sequences."""
    text = Path(path).read_text(encoding="utf-8")
    return [[line.split()[-1] for _, line in block] for block in _blocks(text.splitlines())]


def write_labels(seqs: Sequence[Sequence[str]], path) -> None:
    Path(path).write_text("".join("\n".join(s) + "\n\n" for s in seqs), encoding="utf-8")


def read_dataset(path, fmt: str = "auto", featurizer: FeaturizerConfig = FeaturizerConfig(),
                 labels=None) -> ChainDataset:
    if fmt == "auto":
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
        fmt = "native" if first.startswith("# gpchain-native") else "conll"
    if fmt == "native":
        return read_native(path, labels=labels)
    if fmt == "conll":
        return read_conll(path, featurizer, labels=labels)
    raise ValueError(f"unknown data format {fmt!r}")


# synthetic data from the generative model -------------------------------------

@dataclass
class Latents:
    unary: list
    pairwise: np.ndarray


def synth_generate(V: int, D: int, n_seq: int, length_range=(5, 10),
                   spec: Optional[KernelSpec] = KernelSpec(), seed: int = 0,
                   k_bin: Optional[np.ndarray] = None, pairwise: bool = True):
    """Sample a dataset from the full (non-sparse) GP chain model.

    Token features are i.i.d. standard normal. Each of the V unary
    processes is an exact GP draw over all tokens; ``f_bin ~ N(0, K_bin)``.
    ``spec=None`` makes the unary functions identically zero and
    ``pairwise=False`` zeroes the transitions.
    """
    if V < 2 or D < 1:
        raise ValueError("need V >= 2 and D >= 1")
    lo, hi = length_range
    rng = np.random.default_rng(seed)
    lengths = rng.integers(lo, hi + 1, size=n_seq)
    X_all = rng.standard_normal((int(lengths.sum()), D))
    if spec is None:
        F = np.zeros((X_all.shape[0], V))
    else:
        K = gram(spec, X_all, square=True)
        L = np.linalg.cholesky(K)
        F = L @ rng.standard_normal((X_all.shape[0], V))
    if pairwise:
        kb = np.eye(V * V) if k_bin is None else np.asarray(k_bin)
        fbin = (np.linalg.cholesky(kb) @ rng.standard_normal(V * V)).reshape(V, V)
    else:
        fbin = np.zeros((V, V))
    X, Y, U = [], [], []
    start = 0
    for T in lengths:
        Xn = X_all[start:start + T]
        Fn = F[start:start + T]
        start += T
        X.append(Xn)
        U.append(Fn)
        Y.append(sample_sequence(Fn, fbin, rng))
    labels = [f"L{j}" for j in range(V)]
    return ChainDataset(X, Y, labels, D), Latents(U, fbin)
