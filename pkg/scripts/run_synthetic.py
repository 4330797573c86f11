#!/usr/bin/env python3
"""Synthetic end-to-end experiment: synth -> train -> predict -> evaluate.

Runs the command-line pipeline for a few seeds with ``configs/synthetic.ini``
and prints test token error against the majority-label baseline.

    python3 scripts/run_synthetic.py --seeds 0 1 2 --likelihood pseudo --out runs/
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from gpchain.cli import main as gpchain
from gpchain.data import read_native
from gpchain.model import majority_error

ROOT = Path(__file__).resolve().parents[1]


def run(seed, likelihood, config, out):
    data = out / f"data{seed}"
    run_dir = out / f"{likelihood}{seed}"
    argv = ["--config", str(config), "--seed", str(seed)]
    assert gpchain(["synth", *argv, "--out", str(data)]) == 0
    t0 = time.perf_counter()
    assert gpchain(["train", str(data / "train.txt"), *argv, "--likelihood", likelihood,
                    "--out", str(run_dir)]) == 0
    secs = time.perf_counter() - t0
    assert gpchain(["predict", str(run_dir / "checkpoint.gpc"), str(data / "test.txt"), *argv,
                    "--out", str(run_dir)]) == 0
    gpchain(["evaluate", str(data / "test.txt"), str(run_dir / "predictions.txt"), "--out", str(run_dir)])
    err = json.loads((run_dir / "metrics.json").read_text())["token_error"]
    base = majority_error(read_native(data / "train.txt"), read_native(data / "test.txt"))
    return err, base, secs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--likelihood", choices=("exact", "pseudo"), default="exact")
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "synthetic.ini")
    ap.add_argument("--out", type=Path, default=Path("runs"))
    args = ap.parse_args()
    rows = [run(s, args.likelihood, args.config, args.out) for s in args.seeds]
    for s, (err, base, secs) in zip(args.seeds, rows):
        print(f"seed {s}: error {err:.3f}  majority {base:.3f}  train {secs:.1f}s")
    err, base = np.mean([r[0] for r in rows]), np.mean([r[1] for r in rows])
    print(f"mean: error {err:.3f}  majority {base:.3f}  ratio {err / base:.2f}")


if __name__ == "__main__":
    main()
