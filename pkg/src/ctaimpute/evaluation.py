"""Imputation metrics, trivial baselines and the benchmark report."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .controlpath import TimeSeriesSample, build_control_path
from .data import TEST, Dataset, MissingSpec, apply_missing, denormalize_values


def _select(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("metric mask is empty")
    return pred[mask] - truth[mask]


def mae(pred, truth, mask) -> float:
    return float(np.mean(np.abs(_select(pred, truth, mask))))


def rmse(pred, truth, mask) -> float:
    return float(np.sqrt(np.mean(np.square(_select(pred, truth, mask)))))


def baseline_spline(sample: TimeSeriesSample) -> np.ndarray:
    """Fill hidden entries from the per-channel natural spline of visible ones."""
    path = build_control_path(sample)
    filled = path.value(sample.scaled_times).T
    return np.where(sample.visible_mask, sample.values, filled)


def baseline_mean(sample: TimeSeriesSample, channel_means) -> np.ndarray:
    """Fill hidden entries with the training channel means (0 after z-scoring)."""
    means = np.asarray(channel_means, dtype=np.float64)[:, None]
    return np.where(sample.visible_mask, sample.values, np.broadcast_to(means, sample.truth.shape))


Imputer = Callable[[Sequence[TimeSeriesSample]], list]


@dataclass
class MetricRow:
    method: str
    rate: float
    mae_scores: list = field(default_factory=list)
    rmse_scores: list = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.mae_scores)

    @property
    def mae_mean(self) -> float:
        return float(np.mean(self.mae_scores))

    @property
    def mae_std(self) -> float:
        return float(np.std(self.mae_scores))

    @property
    def rmse_mean(self) -> float:
        return float(np.mean(self.rmse_scores))

    @property
    def rmse_std(self) -> float:
        return float(np.std(self.rmse_scores))


@dataclass
class MetricReport:
    rows: list
    methods: list
    rates: list
    config: dict = field(default_factory=dict)

    def row(self, method: str, rate: float) -> MetricRow:
        for r in self.rows:
            if r.method == method and np.isclose(r.rate, rate):
                return r
        raise KeyError((method, rate))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for key, value in self.config.items():
                fh.write(f"# {key} = {value}\n")
            writer = csv.writer(fh)
            writer.writerow(["method", "rate", "trials", "mae_mean", "mae_std",
                             "rmse_mean", "rmse_std", "mae_trials", "rmse_trials"])
            for r in self.rows:
                writer.writerow([r.method, repr(r.rate), r.trials, repr(r.mae_mean),
                                 repr(r.mae_std), repr(r.rmse_mean), repr(r.rmse_std),
                                 " ".join(repr(x) for x in r.mae_scores),
                                 " ".join(repr(x) for x in r.rmse_scores)])

    def to_text(self) -> str:
        """Method rows by missing-rate columns, each cell ``MAE±std RMSE±std``."""
        name_w = max(8, max(len(m) for m in self.methods))
        cells = {(m, rate): (f"{self.row(m, rate).mae_mean:.3f}±{self.row(m, rate).mae_std:.3f}",
                             f"{self.row(m, rate).rmse_mean:.3f}±{self.row(m, rate).rmse_std:.3f}")
                 for m in self.methods for rate in self.rates}
        half = max(len(x) for pair in cells.values() for x in pair)
        width = 2 * half + 2
        head = "Method".ljust(name_w) + "".join(
            f" | {f'{int(round(100 * r))}%':^{width}}" for r in self.rates)
        sub = " " * name_w + "".join(f" | {'MAE':^{half}}  {'RMSE':^{half}}" for _ in self.rates)
        lines = [head, sub, "-" * len(head)]
        for m in self.methods:
            lines.append(m.ljust(name_w) + "".join(
                f" | {cells[m, r][0]:>{half}}  {cells[m, r][1]:>{half}}" for r in self.rates))
        return "\n".join(lines) + "\n"


def score_imputations(samples: Sequence[TimeSeriesSample], completed: Sequence[np.ndarray],
                      means=None, stds=None) -> tuple[float, float]:
    """MAE/RMSE pooled over every eval-masked entry, in original units if stats given."""
    preds, truths, masks = [], [], []
    for s, filled in zip(samples, completed):
        pred, truth = np.asarray(filled), s.truth
        if means is not None:
            pred = denormalize_values(pred, means, stds)
            truth = denormalize_values(truth, means, stds)
        preds.append(pred)
        truths.append(truth)
        masks.append(s.eval_mask)
    pred = np.concatenate(preds, axis=1)
    truth = np.concatenate(truths, axis=1)
    mask = np.concatenate(masks, axis=1)
    return mae(pred, truth, mask), rmse(pred, truth, mask)


def run_benchmark(dataset: Dataset, methods: Mapping[str, Imputer | Mapping[float, Imputer]],
                  rates: Sequence[float], trials: int = 5, seed: int = 0,
                  split: str | None = TEST) -> MetricReport:
    """Score every method at every missing rate over ``trials`` fresh MCAR masks.

    A method is a callable taking a list of masked samples and returning the
    completed (channels, times) arrays, or a mapping from rate to such a
    callable when a separately trained model is used per rate.
    """
    if dataset.splits is not None and split is not None:
        base = replace(dataset, samples=dataset.split(split), splits=None)
    else:
        base = dataset
    rows = []
    for method in methods:
        for rate in rates:
            rows.append(MetricRow(method, float(rate)))
    for ri, rate in enumerate(rates):
        for trial in range(trials):
            trial_seed = seed + 1000 * ri + trial
            masked = apply_missing(base, MissingSpec(rate, trial_seed)).samples
            for method, imputer in methods.items():
                fn = imputer[rate] if isinstance(imputer, Mapping) else imputer
                completed = fn(masked)
                m, r = score_imputations(masked, completed, dataset.means, dataset.stds)
                row = next(x for x in rows if x.method == method and x.rate == float(rate))
                row.mae_scores.append(m)
                row.rmse_scores.append(r)
    return MetricReport(rows, list(methods), [float(r) for r in rates],
                        {"trials": trials, "seed": seed})


def spline_imputer(samples: Sequence[TimeSeriesSample]) -> list:
    return [baseline_spline(s) for s in samples]


def mean_imputer(channel_means) -> Imputer:
    return lambda samples: [baseline_mean(s, channel_means) for s in samples]
