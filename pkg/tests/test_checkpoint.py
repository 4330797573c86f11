import json

import numpy as np
import pytest

from gpchain.checkpoint import (CheckpointError, POSTERIOR_ARRAYS, load_checkpoint, payload_bytes,
                                read_header, save_checkpoint)
from gpchain.data import synth_generate
from gpchain.model import init_state

from conftest import perturbed


@pytest.fixture
def state():
    data, _ = synth_generate(3, 4, 6, seed=0)
    return perturbed(init_state(data, 7, K=2, seed=0), seed=1)


def test_round_trip_bit_exact(tmp_path, state):
    path = tmp_path / "c.gpc"
    save_checkpoint(state, path, {"note": "x"}, seed=5, trace=[{"elbo": -1.5, "elapsed_seconds": 2.0}])
    back, header = load_checkpoint(path)
    np.testing.assert_array_equal(back.post.to_vector(), state.post.to_vector())
    np.testing.assert_array_equal(back.ind.Z, state.ind.Z)
    assert back.ind.specs == state.ind.specs and back.labels == state.labels
    assert header["seed"] == 5 and header["trace_tail"] == [{"elbo": -1.5}]


def test_save_is_deterministic(tmp_path, state):
    save_checkpoint(state, tmp_path / "a.gpc", {"k": 1})
    save_checkpoint(state, tmp_path / "b.gpc", {"k": 1})
    assert (tmp_path / "a.gpc").read_bytes() == (tmp_path / "b.gpc").read_bytes()


def _rewrite_header(path, edit):
    header, payload = read_header(path)
    edit(header)
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    path.write_bytes(b"gpchain-checkpoint v1\n" + f"header-bytes {len(blob)}\n".encode() + blob + payload)


def test_corrupted_shape_names_array(tmp_path, state):
    path = tmp_path / "c.gpc"
    save_checkpoint(state, path)

    def edit(h):
        entry = next(e for e in h["manifest"] if e["name"] == "means")
        entry["shape"] = [entry["shape"][0], entry["shape"][1], entry["shape"][2] + 1]

    _rewrite_header(path, edit)
    with pytest.raises(CheckpointError, match="means"):
        load_checkpoint(path)


def test_version_mismatch(tmp_path, state):
    path = tmp_path / "c.gpc"
    save_checkpoint(state, path)
    path.write_bytes(path.read_bytes().replace(b"v1\n", b"v2\n", 1))
    with pytest.raises(CheckpointError, match="v2"):
        load_checkpoint(path)


def test_truncated_file(tmp_path, state):
    path = tmp_path / "c.gpc"
    save_checkpoint(state, path)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_payload_matches_declared_shapes(tmp_path):
    data, _ = synth_generate(3, 2, 20, seed=0)
    st = init_state(data, 40, seed=0)
    save_checkpoint(st, tmp_path / "c.gpc")
    header, payload = read_header(tmp_path / "c.gpc")
    V, M = 3, 40
    assert payload_bytes(header, POSTERIOR_ARRAYS) == (V * (M + M * (M + 1) // 2) + 2 * V * V) * 8
    assert len(payload) == payload_bytes(header)
