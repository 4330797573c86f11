#!/usr/bin/env python3
"""Checkpoint size and per-step cost as the number of inducing points grows."""
import argparse
import tempfile
import time
from pathlib import Path

import numpy as np

from gpchain.checkpoint import POSTERIOR_ARRAYS, payload_bytes, read_header, save_checkpoint
from gpchain.data import synth_generate
from gpchain.estimator import MCConfig, grad_ell, projections
from gpchain.model import init_state
from gpchain.posterior import kl_total


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--inducing", type=int, nargs="+", default=[50, 200, 500])
    ap.add_argument("--labels", type=int, default=3)
    ap.add_argument("--samples", type=int, default=1000)
    args = ap.parse_args()
    V = args.labels
    data, _ = synth_generate(V, 5, 100, seed=0)
    print(f"{data.N} training tokens")
    print("M\tposterior_bytes\tformula_bytes\tall_bytes\tstep_ms")
    with tempfile.TemporaryDirectory() as tmp:
        for M in args.inducing:
            state = init_state(data, M, seed=0)
            path = Path(tmp) / "m.gpc"
            save_checkpoint(state, path)
            header, payload = read_header(path)
            formula = (V * (M + M * (M + 1) // 2) + 2 * V * V) * 8
            proj = projections(state.ind, data.X)
            times = []
            for r in range(3):
                t0 = time.perf_counter()
                kl_total(state.post, state.ind)
                grad_ell(state.post, state.ind, data, MCConfig(samples=args.samples, seed=r),
                         subset=[r], proj=proj)
                times.append(time.perf_counter() - t0)
            print(f"{M}\t{payload_bytes(header, POSTERIOR_ARRAYS)}\t{formula}\t{len(payload)}\t"
                  f"{np.median(times) * 1e3:.1f}")


if __name__ == "__main__":
    main()
