"""Single-file checkpoints: a text header followed by raw float64 arrays.

Layout (byte-exact)::

    gpchain-checkpoint v1\\n
    header-bytes <H>\\n
    <H bytes of UTF-8 JSON, keys sorted>\\n
    <payload: little-endian float64 arrays in manifest order>

The JSON header holds ``config``, ``specs`` (one per label process),
``labels``, ``seed``, ``trace_tail`` (without wall-clock fields),
``diagonal`` and ``manifest``, a list of ``{"name", "shape", "offset",
"nbytes"}`` entries whose offsets count from the first payload byte. Arrays are stored in raw (unconstrained)
coordinates; the Cholesky factors as packed lower triangles (or their
diagonals for diagonal posteriors), so a save/load cycle is bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .kernels import KernelSpec
from .model import ModelState
from .posterior import InducingSet, VariationalPosterior

MAGIC = "gpchain-checkpoint"
VERSION = 1
TRACE_TAIL = 20
POSTERIOR_ARRAYS = ("means", "chol", "m_bin", "s_bin")
_DTYPE = np.dtype("<f8")
WALL_CLOCK = ("elapsed_seconds",)  # kept out so identical runs give identical files


class CheckpointError(ValueError):
    pass


def _spec_json(s: KernelSpec) -> dict:
    return {"family": s.family, "lengthscales": list(s.lengthscales), "variance": s.variance,
            "jitter": s.jitter}


def _arrays(state: ModelState) -> dict:
    post = state.post
    r, c = post._tri()
    out = {"Z": state.ind.Z, "logits": post.logits, "means": post.means,
           "chol": post.chol_raw[..., r, c], "m_bin": post.m_bin, "s_bin": post.s_bin_raw}
    if not np.array_equal(post.k_bin, np.eye(post.V ** 2)):
        out["k_bin"] = post.k_bin
    return out


def _expected_shapes(K, V, M, D, diagonal) -> dict:
    ntri = M if diagonal else M * (M + 1) // 2
    return {"Z": (M, D), "logits": (K,), "means": (K, V, M), "chol": (K, V, ntri),
            "m_bin": (V * V,), "s_bin": (V * V,), "k_bin": (V * V, V * V)}


def save_checkpoint(state: ModelState, path, config: dict = None, seed: int = 0,
                    trace: list = None) -> None:
    """Write ``state`` to ``path``; ``trace`` rows are kept as a short tail."""
    arrays = _arrays(state)
    manifest, offset = [], 0
    for name, a in arrays.items():
        nbytes = a.size * _DTYPE.itemsize
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {"config": config or {}, "specs": [_spec_json(s) for s in state.ind.specs],
              "labels": list(state.labels), "seed": seed, "diagonal": bool(state.post.diagonal),
              "trace_tail": [{k: v for k, v in row.items() if k not in WALL_CLOCK}
                             for row in list(trace or [])[-TRACE_TAIL:]],
              "manifest": manifest}
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} v{VERSION}\n".encode("ascii"))
        fh.write(f"header-bytes {len(blob)}\n".encode("ascii"))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())


def read_header(path) -> tuple:
    """Return ``(header dict, payload bytes)`` after checking the version line."""
    raw = Path(path).read_bytes()
    first, _, rest = raw.partition(b"\n")
    parts = first.decode("ascii", "replace").split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointError(f"{path}: not a gpchain checkpoint")
    if parts[1] != f"v{VERSION}":
        raise CheckpointError(f"{path}: checkpoint format {parts[1]} is not supported (need v{VERSION})")
    second, _, rest = rest.partition(b"\n")
    try:
        key, n = second.decode("ascii").split()
        assert key == "header-bytes"
        n = int(n)
    except (ValueError, AssertionError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: malformed header-bytes line")
    if len(rest) < n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})")
    return header, rest[n:]


def payload_bytes(header: dict, names=None) -> int:
    """Total payload size of the named arrays (all arrays by default)."""
    return sum(e["nbytes"] for e in header["manifest"] if names is None or e["name"] in names)


def load_checkpoint(path) -> tuple:
    """Return ``(ModelState, header)``; shapes and invariants are validated."""
    header, payload = read_header(path)
    manifest = header["manifest"]
    arrays = {}
    for e in manifest:
        name, shape = e["name"], tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if n != e["nbytes"]:
            raise CheckpointError(f"array {name!r}: shape {shape} disagrees with nbytes {e['nbytes']}")
        if e["offset"] + n > len(payload):
            raise CheckpointError(f"{path}: truncated payload while reading array {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=_DTYPE, count=n // _DTYPE.itemsize,
                                     offset=e["offset"]).reshape(shape).astype(float)
    for name in ("Z", "logits", "means", "chol", "m_bin", "s_bin"):
        if name not in arrays:
            raise CheckpointError(f"{path}: array {name!r} missing from manifest")
    K, V, M = arrays["means"].shape
    D = arrays["Z"].shape[1] if arrays["Z"].ndim == 2 else -1
    diagonal = bool(header.get("diagonal", False))
    for name, want in _expected_shapes(K, V, M, D, diagonal).items():
        if name in arrays and arrays[name].shape != want:
            raise CheckpointError(f"array {name!r}: shape {arrays[name].shape} does not match "
                                  f"expected {want}")
    specs = [KernelSpec(s["family"], tuple(s["lengthscales"]), s["variance"], s["jitter"])
             for s in header["specs"]]
    if len(specs) != V or len(header["labels"]) != V:
        raise CheckpointError(f"{path}: {len(specs)} kernels / {len(header['labels'])} labels "
                              f"for {V} processes")
    chol = np.zeros((K, V, M, M))
    r, c = (np.arange(M), np.arange(M)) if diagonal else np.tril_indices(M)
    chol[..., r, c] = arrays["chol"]
    post = VariationalPosterior(arrays["logits"], arrays["means"], chol, arrays["m_bin"],
                                arrays["s_bin"], arrays.get("k_bin"), diagonal)
    try:
        post.check()
    except AssertionError:
        raise CheckpointError(f"{path}: stored posterior violates its domain invariants")
    return ModelState(InducingSet(arrays["Z"], specs), post, list(header["labels"])), header
