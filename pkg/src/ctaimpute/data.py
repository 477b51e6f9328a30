"""Datasets: CSV ingestion, synthetic series, normalization and masking."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .controlpath import TimeSeriesSample

TRAIN, VAL, TEST = "train", "val", "test"
MISSING_TOKENS = {"", "nan", "NaN", "NAN", "na", "NA"}


class CsvParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass
class Dataset:
    samples: list
    splits: list | None = None
    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    channel_names: list | None = None
    normalized: bool = False

    def __post_init__(self):
        channels = {s.n_channels for s in self.samples}
        if len(channels) > 1:
            raise ValueError(f"samples disagree on channel count: {sorted(channels)}")
        if self.splits is not None and len(self.splits) != len(self.samples):
            raise ValueError("one split label per sample required")

    @property
    def n_channels(self) -> int:
        return self.samples[0].n_channels

    def __len__(self):
        return len(self.samples)

    def split(self, name: str) -> list:
        if self.splits is None:
            raise ValueError("dataset has no split labels")
        return [s for s, lab in zip(self.samples, self.splits) if lab == name]

    def with_samples(self, samples: list) -> "Dataset":
        return replace(self, samples=list(samples))


# -- CSV --------------------------------------------------------------------

@dataclass
class CsvTable:
    header: list | None
    rows: list            # raw string cells, one list per data row
    line_numbers: list    # 1-based file line of each data row
    times: np.ndarray
    values: np.ndarray    # (rows, channels), NaN where missing


def _parse_float(cell: str) -> float:
    cell = cell.strip()
    if cell in MISSING_TOKENS:
        return math.nan
    return float(cell)


def read_csv_table(path) -> CsvTable:
    """Read ``time, ch1, ch2, ...`` rows; a non-numeric first row is a header."""
    header = None
    rows, lines, times, values = [], [], [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if not rows and header is None:
                try:
                    float(row[0])
                except ValueError:
                    header = row
                    width = len(row)
                    continue
            if width is None:
                width = len(row)
            if len(row) != width:
                raise CsvParseError(path, lineno, f"expected {width} cells, got {len(row)}")
            if width < 2:
                raise CsvParseError(path, lineno, "need a time column and at least one channel")
            try:
                t = float(row[0])
                vals = [_parse_float(c) for c in row[1:]]
            except ValueError as exc:
                raise CsvParseError(path, lineno, str(exc)) from None
            if not math.isfinite(t):
                raise CsvParseError(path, lineno, "timestamp must be finite")
            rows.append(row)
            lines.append(lineno)
            times.append(t)
            values.append(vals)
    if not rows:
        raise CsvParseError(path, 0, "no data rows")
    return CsvTable(header, rows, lines, np.array(times), np.array(values, dtype=np.float64))


def window_bounds(n_rows: int, window: int | None) -> list[tuple[int, int]]:
    """Non-overlapping windows; a short tail becomes a final window ending at the last row."""
    if window is None or window >= n_rows:
        return [(0, n_rows)]
    if window < 2:
        raise ValueError("window must be at least 2")
    bounds = [(s, s + window) for s in range(0, n_rows - window + 1, window)]
    if bounds[-1][1] < n_rows:
        bounds.append((n_rows - window, n_rows))
    return bounds


def load_csv(path, window: int | None = None, keep_tail: bool = False) -> Dataset:
    """Load a CSV into fixed-length samples.

    By default a tail shorter than ``window`` is dropped; ``keep_tail`` adds an
    overlapping last window instead (used when every row must be covered).
    """
    table = read_csv_table(path)
    n = len(table.rows)
    if window is not None and window < n and not keep_tail:
        bounds = [(s, s + window) for s in range(0, n - window + 1, window)]
    else:
        bounds = window_bounds(n, window)
    samples = []
    for lo, hi in bounds:
        t = table.times[lo:hi]
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            raise CsvParseError(path, table.line_numbers[lo + bad[0] + 1],
                                "timestamps must be strictly increasing")
        if hi - lo < 2:
            raise CsvParseError(path, table.line_numbers[lo], "a window needs at least two rows")
        samples.append(TimeSeriesSample(t, table.values[lo:hi].T))
    names = table.header[1:] if table.header else None
    return Dataset(samples, channel_names=names)


def _fmt(x: float) -> str:
    return "NaN" if math.isnan(x) else repr(float(x))


def write_csv(path, samples: Sequence[TimeSeriesSample], channel_names=None,
              use_truth: bool = False) -> None:
    """Write samples back to back. By default hidden entries are written as NaN."""
    if not samples:
        raise ValueError("nothing to write")
    n_ch = samples[0].n_channels
    names = list(channel_names) if channel_names else [f"ch{j}" for j in range(n_ch)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + names)
        for s in samples:
            vals = s.truth if use_truth else s.values
            for i, t in enumerate(s.times):
                writer.writerow([_fmt(t)] + [_fmt(v) for v in vals[:, i]])


# -- masking ----------------------------------------------------------------

@dataclass
class MissingSpec:
    rate: float
    seed: int = 0
    pattern: str = "MCAR"

    def __post_init__(self):
        if not 0.0 < self.rate < 1.0:
            raise ValueError("missing rate must lie strictly in (0, 1)")
        if self.pattern != "MCAR":
            raise ValueError("only MCAR masking is supported")


def mcar_mask(observed: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    flat = np.flatnonzero(observed)
    n = int(math.floor(rate * flat.size))
    mask = np.zeros(observed.size, dtype=bool)
    if n:
        mask[rng.choice(flat, size=n, replace=False)] = True
    return mask.reshape(observed.shape)


def apply_missing(dataset: Dataset, spec: MissingSpec, split: str | None = None) -> Dataset:
    """Hold out floor(rate * #observed) entries per sample (replacing old eval masks).

    With ``split`` set, only samples of that split are masked; the rest keep
    their current masks.
    """
    rng = np.random.default_rng(spec.seed)
    out = []
    for i, s in enumerate(dataset.samples):
        if split is not None and dataset.splits[i] != split:
            out.append(s)
            continue
        out.append(s.with_eval_mask(mcar_mask(s.observed_mask, spec.rate, rng)))
    return dataset.with_samples(out)


def clear_missing(dataset: Dataset) -> Dataset:
    return dataset.with_samples(
        [s.with_eval_mask(np.zeros_like(s.eval_mask)) for s in dataset.samples])


# -- splits and normalization ----------------------------------------------

def split_dataset(dataset: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> Dataset:
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    labels = [TEST] * n
    for rank, i in enumerate(order):
        labels[i] = TRAIN if rank < n_train else VAL if rank < n_train + n_val else TEST
    return replace(dataset, splits=labels)


def fit_normalizer(dataset: Dataset, split: str | None = TRAIN) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over visible entries of ``split`` (all samples if None)."""
    samples = dataset.samples if split is None or dataset.splits is None else dataset.split(split)
    vals = np.concatenate([s.values for s in samples], axis=1)
    means = np.nanmean(vals, axis=1)
    stds = np.nanstd(vals, axis=1)
    means = np.where(np.isnan(means), 0.0, means)
    flat = ~(stds > 1e-12)
    if flat.any():
        warnings.warn(f"zero-variance channels {np.flatnonzero(flat).tolist()}; using unit scale",
                      RuntimeWarning, stacklevel=2)
        stds = np.where(flat, 1.0, stds)
    return means, stds


def normalize(dataset: Dataset, means=None, stds=None) -> Dataset:
    if means is None or stds is None:
        means, stds = fit_normalizer(dataset)
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    samples = [replace(s, truth=(s.truth - means[:, None]) / stds[:, None],
                       eval_mask=s.eval_mask.copy()) for s in dataset.samples]
    return replace(dataset, samples=samples, means=means, stds=stds, normalized=True)


def denormalize(dataset: Dataset) -> Dataset:
    if not dataset.normalized:
        return dataset
    samples = [replace(s, truth=denormalize_values(s.truth, dataset.means, dataset.stds),
                       eval_mask=s.eval_mask.copy()) for s in dataset.samples]
    return replace(dataset, samples=samples, normalized=False)


def denormalize_values(values: np.ndarray, means, stds) -> np.ndarray:
    """Invert the z-score for a (channels, times) array."""
    return values * np.asarray(stds)[:, None] + np.asarray(means)[:, None]


def normalize_values(values: np.ndarray, means, stds) -> np.ndarray:
    return (values - np.asarray(means)[:, None]) / np.asarray(stds)[:, None]


# -- synthetic data ---------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_samples: int = 200
    n_channels: int = 4
    length: int = 100
    irregularity: float = 0.5
    noise: float = 0.05
    freq_range: tuple = (1.0, 3.0)
    damping_range: tuple = (0.0, 1.0)
    amplitude_range: tuple = (0.5, 1.5)
    random_phase: bool = True
    seed: int = 0
    channel_phases: list | None = field(default=None)

    def __post_init__(self):
        if min(self.n_samples, self.n_channels) < 1 or self.length < 2:
            raise ValueError("sizes must be positive and length >= 2")
        if not 0.0 <= self.irregularity < 1.0:
            raise ValueError("irregularity must lie in [0, 1)")


def irregular_times(length: int, irregularity: float, rng: np.random.Generator) -> np.ndarray:
    """Grid i/(length-1) with interior points jittered by up to +-irregularity/2 of a cell."""
    base = np.arange(length, dtype=np.float64)
    if irregularity > 0:
        jitter = rng.uniform(-irregularity / 2, irregularity / 2, size=length)
        jitter[[0, -1]] = 0.0
        base = base + jitter
    return base / (length - 1)


def make_synthetic(config: SyntheticConfig | None = None, **overrides) -> Dataset:
    """Damped, phase-shifted sinusoids sharing one frequency per sample.

    Channel ``c`` of a sample is
    ``a_c * exp(-lam * t) * sin(2*pi*f*t + phi + delta_c)`` plus Gaussian
    noise, with ``f``, ``phi``, ``lam`` drawn per sample and the amplitudes
    ``a_c`` and phase offsets ``delta_c`` fixed per dataset. Channel 0 has
    ``delta_0 = 0``.
    """
    cfg = replace(config or SyntheticConfig(), **overrides)
    rng = np.random.default_rng(cfg.seed)
    C = cfg.n_channels
    if cfg.channel_phases is not None:
        deltas = np.asarray(cfg.channel_phases, dtype=np.float64)
    else:
        deltas = np.concatenate([[0.0], rng.uniform(0, 2 * np.pi, C - 1)])
    amps = rng.uniform(*cfg.amplitude_range, size=C)
    amps[0] = 1.0
    samples = []
    for _ in range(cfg.n_samples):
        t = irregular_times(cfg.length, cfg.irregularity, rng)
        f = rng.uniform(*cfg.freq_range)
        phi = rng.uniform(0, 2 * np.pi) if cfg.random_phase else 0.0
        lam = rng.uniform(*cfg.damping_range)
        x = (amps[:, None] * np.exp(-lam * t)[None, :]
             * np.sin(2 * np.pi * f * t[None, :] + phi + deltas[:, None]))
        if cfg.noise > 0:
            x = x + cfg.noise * rng.standard_normal(x.shape)
        samples.append(TimeSeriesSample(t, x))
    return Dataset(samples, channel_names=[f"ch{j}" for j in range(C)])


def prepare_dataset(dataset: Dataset, rate: float | None, seed: int = 0,
                    fractions=(0.7, 0.1, 0.2)) -> Dataset:
    """Split, hold out ``rate`` of every sample's entries, then z-score with train stats."""
    ds = split_dataset(dataset, fractions, seed)
    if rate:
        ds = apply_missing(ds, MissingSpec(rate, seed + 1))
    return normalize(ds, *fit_normalizer(ds, TRAIN))
