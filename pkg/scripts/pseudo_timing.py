#!/usr/bin/env python3
"""Per-step gradient cost of the exact and pseudo likelihoods as V grows."""
import argparse
import time

import numpy as np

from gpchain.data import synth_generate
from gpchain.estimator import MCConfig, grad_ell, projections
from gpchain.model import init_state


def step_time(state, data, proj, likelihood, samples, reps):
    times = []
    for r in range(reps):
        t0 = time.perf_counter()
        grad_ell(state.post, state.ind, data, MCConfig(samples=samples, seed=r), likelihood,
                 subset=[r % data.n_seq], proj=proj)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--labels", type=int, nargs="+", default=[3, 6, 10, 14])
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()
    print("V\texact_ms\tpseudo_ms\tratio")
    for V in args.labels:
        data, _ = synth_generate(V, 5, 20, seed=0)
        state = init_state(data, 20, seed=0)
        proj = projections(state.ind, data.X)
        ex, ps = (step_time(state, data, proj, lik, args.samples, args.reps) for lik in ("exact", "pseudo"))
        print(f"{V}\t{ex * 1e3:.1f}\t{ps * 1e3:.1f}\t{ps / ex:.2f}")


if __name__ == "__main__":
    main()
