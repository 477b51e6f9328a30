"""Command-line runs: train, impute, benchmark, print-config.

Configuration is a plain ``key = value`` file (``#`` comments allowed, no
section header needed). Every key has a default; ``print-config`` lists them.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import diffcore as dc
from .controlpath import TimeSeriesSample
from .cta import Chain, ModelConfig, impute_samples, parse_chain_spec
from .data import (TRAIN, VAL, Dataset, SyntheticConfig, denormalize_values, load_csv,
                   make_synthetic, normalize_values, prepare_dataset, read_csv_table, window_bounds)
from .evaluation import mean_imputer, run_benchmark, spline_imputer
from .training import TrainConfig, train, write_history_csv

log = logging.getLogger("ctaimpute")

SYNTHETIC = "synthetic"
BASELINES = ("spline", "mean")
_SECTION = "run"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data: str = SYNTHETIC
    window: int = 100
    data_seed: int = 0
    n_samples: int = 200
    n_channels: int = 4
    irregularity: float = 0.5
    noise: float = 0.05
    missing_rate: float = 0.7
    # model
    chain: str = "AE-AE"
    latent: int = 8
    decoder: int = 8
    hidden: int = 16
    n_hidden: int = 1
    head_hidden: int = 16
    step: float | None = None
    method: str = "euler"
    time_feature: bool = False
    fuse_with_mask: bool = False
    # training
    batch_size: int = 16
    max_iter: int = 500
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask_ratio: float = 0.2
    kld_weight: float = 1.0
    val_every: int = 25
    normalize_loss: bool = True
    seed: int = 0
    # benchmark
    rates: str = "0.3,0.5,0.7"
    methods: str = "AE-AE,spline,mean"
    trials: int = 5
    out_dir: str = "runs"

    def __post_init__(self):
        parse_chain_spec(self.chain)
        for m in self.method_list:
            if m not in BASELINES:
                parse_chain_spec(m)
        for r in self.rate_list:
            if not 0.0 < r < 1.0:
                raise ConfigError(f"missing rate {r} outside (0, 1)")
        if not 0.0 < self.missing_rate < 1.0:
            raise ConfigError("missing_rate must lie in (0, 1)")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")

    @property
    def rate_list(self) -> list:
        return [float(x) for x in self.rates.split(",") if x.strip()]

    @property
    def method_list(self) -> list:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    def model_config(self, n_channels: int) -> ModelConfig:
        return ModelConfig(n_channels, self.latent, self.decoder, self.hidden, self.n_hidden,
                           self.head_hidden, self.step, self.method, self.time_feature,
                           self.fuse_with_mask)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.max_iter, self.lr, self.beta1, self.beta2,
                           self.eps, self.mask_ratio, self.seed, self.kld_weight,
                           self.val_every, self.normalize_loss)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.to_dict().items())


def _format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    kind = str(kind)
    if "None" in kind and raw.lower() in ("auto", "none", ""):
        return None
    try:
        if kind.startswith("bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def load_run_config(path: str | None, seed: int | None = None,
                    out_dir: str | None = None) -> RunConfig:
    """Parse a key-value config file; unknown keys are an error."""
    values = {}
    if path is not None:
        if not os.path.isfile(path):
            raise FileNotFoundError(path)
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str
        with open(path) as fh:
            text = fh.read()
        try:
            parser.read_string(f"[{_SECTION}]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        known = {f.name: f.type for f in fields(RunConfig)}
        for key, raw in parser.items(_SECTION):
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r}")
            values[key] = _coerce(key, known[key], raw)
    if seed is not None:
        values["seed"] = seed
    if out_dir is not None:
        values["out_dir"] = out_dir
    try:
        return RunConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data == SYNTHETIC:
        return make_synthetic(SyntheticConfig(n_samples=cfg.n_samples, n_channels=cfg.n_channels,
                                              length=cfg.window, irregularity=cfg.irregularity,
                                              noise=cfg.noise, seed=cfg.data_seed))
    return load_csv(cfg.data, window=cfg.window)


def _provenance(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "config": json.dumps(cfg.to_dict(), sort_keys=True)}


def _train_one(cfg: RunConfig, dataset: Dataset, chain_spec: str, rate: float):
    ds = prepare_dataset(dataset, rate, cfg.seed)
    chain = Chain.init(chain_spec, cfg.model_config(ds.n_channels), cfg.seed)
    result = train(ds.split(TRAIN), ds.split(VAL), chain, cfg.train_config())
    meta = {"run": cfg.to_dict(), "chain": chain_spec, "missing_rate": rate,
            "model": chain.cfg.to_dict(), "means": ds.means.tolist(),
            "stds": ds.stds.tolist(), "channel_names": ds.channel_names,
            "window": cfg.window, "best_iteration": result.best_iteration,
            "best_val_mae": result.best_val_mae}
    return ds, chain, result, meta


def cmd_train(cfg: RunConfig) -> dict:
    """Train one chain; write checkpoint, config echo and loss history."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset = load_dataset(cfg)
    _, chain, result, meta = _train_one(cfg, dataset, cfg.chain, cfg.missing_rate)
    paths = {"checkpoint": os.path.join(cfg.out_dir, "checkpoint.json"),
             "history": os.path.join(cfg.out_dir, "history.csv"),
             "config": os.path.join(cfg.out_dir, "config.txt")}
    dc.save_checkpoint(paths["checkpoint"], chain.state_dict(), meta)
    write_history_csv(paths["history"], result.history, _provenance(cfg))
    with open(paths["config"], "w") as fh:
        fh.write(cfg.to_text())
    log.info("best iteration %d, val MAE %.5f", result.best_iteration, result.best_val_mae)
    return paths


def load_model(checkpoint: str) -> tuple[Chain, dict]:
    state, meta = dc.load_checkpoint(checkpoint)
    model = dict(meta["model"])
    cfg = ModelConfig(**model)
    chain = Chain.init(meta["chain"], cfg, 0)
    chain.load_state_dict(state)
    return chain, meta


def cmd_impute(checkpoint: str, input_csv: str, output_csv: str) -> int:
    """Fill missing cells of ``input_csv``; every present cell is copied verbatim."""
    chain, meta = load_model(checkpoint)
    table = read_csv_table(input_csv)
    expected = chain.cfg.n_channels
    actual = table.values.shape[1]
    if actual != expected:
        raise ValueError(f"checkpoint expects {expected} channels, input has {actual}")
    means, stds = np.asarray(meta["means"]), np.asarray(meta["stds"])
    n = len(table.rows)
    bounds = window_bounds(n, meta.get("window"))
    samples = []
    for lo, hi in bounds:
        t = table.times[lo:hi]
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"{input_csv}: timestamps must be strictly increasing")
        samples.append(TimeSeriesSample(t, normalize_values(table.values[lo:hi].T, means, stds)))
    filled_norm = impute_samples(samples, chain)
    filled = np.full(table.values.shape, np.nan)
    for (lo, hi), f in zip(bounds, filled_norm):
        filled[lo:hi] = (f * stds[:, None] + means[:, None]).T
    n_filled = 0
    with open(output_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if table.header is not None:
            writer.writerow(table.header)
        for i, row in enumerate(table.rows):
            out = list(row)
            for j in range(actual):
                if math.isnan(table.values[i, j]):
                    out[j + 1] = repr(float(filled[i, j]))
                    n_filled += 1
            writer.writerow(out)
    return n_filled


def _model_imputer(chain: Chain, meta: dict, means, stds):
    """Impute samples z-scored with ``means``/``stds`` using a model trained on other stats."""
    m_means, m_stds = np.asarray(meta["means"]), np.asarray(meta["stds"])

    def run(samples):
        moved = [replace(s, truth=normalize_values(denormalize_values(s.truth, means, stds),
                                                   m_means, m_stds)) for s in samples]
        return [normalize_values(denormalize_values(f, m_means, m_stds), means, stds)
                for f in impute_samples(moved, chain)]
    return run


def cmd_benchmark(cfg: RunConfig) -> dict:
    """Train each requested chain per missing rate, score it with the baselines."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset = load_dataset(cfg)
    rates = cfg.rate_list
    methods = {}
    prepared = prepare_dataset(dataset, None, cfg.seed)
    for m in cfg.method_list:
        if m == "spline":
            methods[m] = spline_imputer
        elif m == "mean":
            methods[m] = mean_imputer(np.zeros(prepared.n_channels))
        else:
            per_rate = {}
            for rate in rates:
                _, chain, _, meta = _train_one(cfg, dataset, m, rate)
                path = os.path.join(cfg.out_dir, f"{m}_r{int(round(100 * rate))}.json")
                dc.save_checkpoint(path, chain.state_dict(), meta)
                per_rate[rate] = _model_imputer(chain, meta, prepared.means, prepared.stds)
            methods[m] = per_rate
    report = run_benchmark(prepared, methods, rates, trials=cfg.trials, seed=cfg.seed)
    report.config.update(_provenance(cfg))
    paths = {"csv": os.path.join(cfg.out_dir, "report.csv"),
             "text": os.path.join(cfg.out_dir, "report.txt")}
    report.to_csv(paths["csv"])
    with open(paths["text"], "w") as fh:
        for key, value in report.config.items():
            fh.write(f"# {key} = {value}\n")
        fh.write(report.to_text())
    return paths


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctaimpute", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out-dir", help="override the config output directory")

    common(sub.add_parser("train", help="train a model and write a checkpoint"))
    common(sub.add_parser("benchmark", help="score models and baselines over missing rates"))
    common(sub.add_parser("print-config", help="print the resolved configuration"))
    imp = sub.add_parser("impute", help="fill missing cells of a CSV")
    imp.add_argument("checkpoint")
    imp.add_argument("input")
    imp.add_argument("output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        if args.command == "impute":
            n = cmd_impute(args.checkpoint, args.input, args.output)
            print(f"filled {n} cells -> {args.output}")
            return 0
        cfg = load_run_config(args.config, args.seed, args.out_dir)
        if args.command == "print-config":
            sys.stdout.write(cfg.to_text())
        elif args.command == "train":
            for k, v in cmd_train(cfg).items():
                print(f"{k}: {v}")
        else:
            for k, v in cmd_benchmark(cfg).items():
                print(f"{k}: {v}")
        return 0
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc.args[0]}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
