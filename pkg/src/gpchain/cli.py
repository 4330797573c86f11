"""Command-line entry point: ``gpchain {synth,train,predict,evaluate}``.

Settings come from an optional INI file whose sections mirror the modules
(``[data]``, ``[model]``, ``[mc]``, ``[schedule]``, ``[run]``, ``[synth]``);
command-line flags override the file. Exit codes: 0 success, 2 config
error, 3 numeric failure, 4 I/O or data error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DataFormatError, FeaturizerConfig, read_dataset, read_labels, read_native,
                   synth_generate, write_labels, write_native)
from .estimator import EstimationError, MCConfig
from .kernels import KernelSpec
from .model import init_state, predict
from .optim import TRACE_FIELDS, TrainSchedule, train

log = logging.getLogger("gpchain")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.gpc"
TRACE_NAME = "trace.tsv"
METRIC_FIELDS = ("token_error", "tokens", "sequences", "sequence_exact_match", "labels",
                 "confusion")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    inducing: int = 100
    mixture: int = 1
    kernel: str = "squared-exponential"
    lengthscale: float = 1.0
    variance: float = 1.0
    likelihood: str = "exact"
    diagonal: bool = False
    cov_scale: float = 0.1

    def spec(self) -> KernelSpec:
        return KernelSpec(self.kernel, (self.lengthscale,), self.variance)


@dataclass
class SynthConfig:
    labels: int = 3
    dim: int = 5
    n_train: int = 50
    n_test: int = 50
    min_length: int = 5
    max_length: int = 10


@dataclass
class RunConfig:
    subcommand: str
    model: ModelConfig = field(default_factory=ModelConfig)
    mc: MCConfig = field(default_factory=MCConfig)
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(mode="stochastic"))
    synth: SynthConfig = field(default_factory=SynthConfig)
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    seed: int = 0
    out: Path = Path(".")
    train_path: Optional[Path] = None
    data_path: Optional[Path] = None
    checkpoint: Optional[Path] = None

    def to_json(self) -> dict:
        # worker count is left out: it never changes results, so it must not change files
        mc = {k: v for k, v in _plain(self.mc).items() if k != "threads"}
        return {"model": dataclasses.asdict(self.model), "mc": mc,
                "schedule": _plain(self.schedule), "featurizer": _plain(self.featurizer),
                "seed": self.seed}


def _plain(obj) -> dict:
    out = {}
    for k, v in dataclasses.asdict(obj).items():
        if isinstance(v, float) and not math.isfinite(v):
            v = repr(v)
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


# config parsing --------------------------------------------------------------

def _coerce(cls, name, text):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name not in fields:
        raise ConfigError(f"unknown setting {name!r} for {cls.__name__}")
    kind = fields[name].type
    kind = kind if isinstance(kind, str) else kind.__name__
    text = str(text).strip()
    try:
        if "Optional" in kind and text.lower() in ("", "none"):
            return None
        if "bool" in kind:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return float(text)
        if "tuple" in kind:
            return tuple(int(v) for v in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(f"{cls.__name__}.{name}: cannot parse {text!r}")


def _build(cls, values: dict, **fixed):
    kwargs = dict(fixed)
    for k, v in values.items():
        kwargs[k] = _coerce(cls, k, v)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}")


def load_config(args) -> RunConfig:
    ini = configparser.ConfigParser()
    if args.config is not None:
        if not Path(args.config).is_file():
            raise FileNotFoundError(f"config file {args.config} not found")
        ini.read(args.config, encoding="utf-8")
    sec = {name: dict(ini[name]) if ini.has_section(name) else {}
           for name in ("data", "model", "mc", "schedule", "run", "synth")}
    flags = {"inducing": ("model", "inducing"), "mixture": ("model", "mixture"),
             "likelihood": ("model", "likelihood"), "samples": ("mc", "samples"),
             "threads": ("mc", "threads"), "seed": ("run", "seed"), "out": ("run", "out")}
    for flag, (s, key) in flags.items():
        v = getattr(args, flag, None)
        if v is not None:
            sec[s][key] = str(v)
    seed = _coerce(RunConfig, "seed", sec["run"].pop("seed", "0"))
    out = Path(sec["run"].pop("out", "."))
    if sec["run"]:
        raise ConfigError(f"unknown [run] settings: {sorted(sec['run'])}")
    model = _build(ModelConfig, sec["model"])
    if model.inducing < 1 or model.mixture < 1:
        raise ConfigError("model.inducing and model.mixture must be >= 1")
    if model.likelihood not in ("exact", "pseudo"):
        raise ConfigError(f"model.likelihood must be exact or pseudo, got {model.likelihood!r}")
    try:
        model.spec()
    except ValueError as exc:
        raise ConfigError(f"model kernel: {exc}")
    sec["mc"].setdefault("seed", str(seed))
    mc = _build(MCConfig, sec["mc"])
    sec["schedule"].setdefault("mode", "stochastic")
    schedule = _build(TrainSchedule, sec["schedule"])
    synth = _build(SynthConfig, sec["synth"])
    feat_keys = {k: v for k, v in sec["data"].items() if k in ("dim", "window", "columns")}
    featurizer = _build(FeaturizerConfig, feat_keys)
    rc = RunConfig(args.command, model, mc, schedule, synth, featurizer, seed, out)
    for attr, key in (("train_path", "train"), ("data_path", "data"), ("checkpoint", "checkpoint")):
        v = getattr(args, key, None) or sec["data"].get(key)
        if v is not None:
            setattr(rc, attr, Path(v))
    return rc


# subcommands -----------------------------------------------------------------

def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} path is required")
    if not path.is_file():
        raise FileNotFoundError(f"{what} file {path} not found")
    return path


class TraceWriter:
    """Append-only TSV trace, one record per line, flushed as written."""

    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=TRACE_FIELDS, delimiter="\t",
                                     lineterminator="\n")
        self.writer.writeheader()
        self.fh.flush()

    def __call__(self, row):
        self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        self.fh.flush()

    def close(self):
        self.fh.close()


def cmd_train(rc: RunConfig) -> int:
    data = read_dataset(_require(rc.train_path, "training data"), featurizer=rc.featurizer)
    rc.out.mkdir(parents=True, exist_ok=True)
    state = init_state(data, min(rc.model.inducing, data.N), K=rc.model.mixture,
                       spec=rc.model.spec(), seed=rc.seed, cov_scale=rc.model.cov_scale,
                       diagonal=rc.model.diagonal)
    tracer = TraceWriter(rc.out / TRACE_NAME)
    try:
        result = train(state, data, rc.schedule, rc.mc, rc.model.likelihood, trace=tracer)
    finally:
        tracer.close()
    save_checkpoint(result.state, rc.out / CHECKPOINT_NAME, rc.to_json(), rc.seed, result.trace)
    log.info("training finished: status %s, best ELBO %s", result.status, result.best_elbo)
    return EXIT_NUMERIC if result.status == "numeric-failure" else EXIT_OK


def cmd_predict(rc: RunConfig, decode: str, mode: str, marginals: bool) -> int:
    state, header = load_checkpoint(_require(rc.checkpoint, "checkpoint"))
    feat = header.get("config", {}).get("featurizer")
    featurizer = rc.featurizer
    if feat:
        featurizer = FeaturizerConfig(feat["dim"], feat["window"],
                                      None if feat["columns"] is None else tuple(feat["columns"]))
    data = read_dataset(_require(rc.data_path, "data"), featurizer=featurizer, labels=state.labels)
    paths, margs = predict(state, data, decode=decode, mode=mode, samples=rc.mc.samples,
                           seed=rc.seed)
    rc.out.mkdir(parents=True, exist_ok=True)
    write_labels([[state.labels[i] for i in p] for p in paths], rc.out / "predictions.txt")
    if marginals:
        with open(rc.out / "marginals.tsv", "w", encoding="utf-8") as fh:
            fh.write("sequence\ttoken\t" + "\t".join(state.labels) + "\n")
            for n, m in enumerate(margs):
                for t, row in enumerate(m):
                    fh.write(f"{n}\t{t}\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    return EXIT_OK


def read_gold(path: Path) -> list:
    with open(path, encoding="utf-8") as fh:
        native = fh.readline().startswith("# gpchain-native")
    if native:
        ds = read_native(path)
        return [[ds.labels[i] for i in y] for y in ds.y]
    return read_labels(path)


def evaluate_labels(gold: list, pred: list) -> dict:
    """Token error, exact-match rate and confusion counts for aligned label lists."""
    if len(gold) != len(pred):
        raise DataFormatError(f"{len(gold)} gold sequences but {len(pred)} predicted")
    for n, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise DataFormatError(f"sequence {n}: {len(g)} gold tokens but {len(p)} predicted")
    labels = sorted({lab for seq in gold + pred for lab in seq})
    confusion = {g: {p: 0 for p in labels} for g in labels}
    wrong = tokens = exact = 0
    for g, p in zip(gold, pred):
        for a, b in zip(g, p):
            confusion[a][b] += 1
            wrong += a != b
        tokens += len(g)
        exact += list(g) == list(p)
    return {"token_error": wrong / tokens if tokens else 0.0, "tokens": tokens,
            "sequences": len(gold), "sequence_exact_match": exact / len(gold) if gold else 0.0,
            "labels": labels, "confusion": confusion}


def cmd_evaluate(gold_path: Path, pred_path: Path, out: Optional[Path]) -> int:
    metrics = evaluate_labels(read_gold(_require(gold_path, "gold")),
                              read_labels(_require(pred_path, "predicted")))
    text = json.dumps(metrics, sort_keys=True)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_synth(rc: RunConfig) -> int:
    s = rc.synth
    ds, lat = synth_generate(s.labels, s.dim, s.n_train + s.n_test, (s.min_length, s.max_length),
                             spec=rc.model.spec(), seed=rc.seed)
    rc.out.mkdir(parents=True, exist_ok=True)
    write_native(ds.subset(range(s.n_train)), rc.out / "train.txt")
    write_native(ds.subset(range(s.n_train, s.n_train + s.n_test)), rc.out / "test.txt")
    with open(rc.out / "latents.npz", "wb") as fh:
        np.savez(fh, unary=np.concatenate(lat.unary), lengths=ds.lengths, pairwise=lat.pairwise,
                 n_train=s.n_train)
    return EXIT_OK


# entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="estimator worker threads")
    common.add_argument("--likelihood", choices=("exact", "pseudo"))
    common.add_argument("--inducing", type=int, help="number of inducing points M")
    common.add_argument("--mixture", type=int, help="mixture components K")
    common.add_argument("--samples", type=int, help="Monte-Carlo samples S")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="gpchain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="fit a model, write checkpoint + trace")
    t.add_argument("train", nargs="?", help="training data (native or column format)")
    q = sub.add_parser("predict", parents=[common], help="decode a dataset with a checkpoint")
    q.add_argument("checkpoint", nargs="?")
    q.add_argument("data", nargs="?")
    q.add_argument("--decode", choices=("marginal", "viterbi"), default="marginal")
    q.add_argument("--mode", choices=("point", "sampled"), default="point")
    q.add_argument("--marginals", action="store_true", help="also write per-token marginals")
    e = sub.add_parser("evaluate", parents=[common], help="score predicted labels against gold")
    e.add_argument("gold")
    e.add_argument("predicted")
    sub.add_parser("synth", parents=[common], help="sample train/test data from the model")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate":
            return cmd_evaluate(Path(args.gold), Path(args.predicted), args.out)
        rc = load_config(args)
        if args.command == "train":
            return cmd_train(rc)
        if args.command == "predict":
            return cmd_predict(rc, args.decode, args.mode, args.marginals)
        return cmd_synth(rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
