"""Masked reconstruction + KL loss and the mini-batch training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .controlpath import TimeSeriesSample
from .cta import TRAIN, Batch, Chain, ImputationResult, chain_forward, impute_batch
from .ncde import DivergenceError

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "total", "recon_tilde", "recon_hat", "recon_hat_prime",
                  "recon_masked", "kld", "val_mae")


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration: int, last_finite_loss: float, detail: str = ""):
        self.iteration = iteration
        self.last_finite_loss = last_finite_loss
        msg = f"training diverged at iteration {iteration} (last finite loss {last_finite_loss})"
        super().__init__(msg + (f": {detail}" if detail else ""))


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_iter: int = 500
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask_ratio: float = 0.2
    seed: int = 0
    kld_weight: float = 1.0
    val_every: int = 25
    normalize_loss: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.max_iter < 0 or self.lr <= 0 or self.val_every < 1:
            raise ValueError("batch_size, lr and val_every must be positive; max_iter >= 0")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskSet:
    observed: np.ndarray     # O: ground truth known and usable (not held out)
    intentional: np.ndarray  # M: additionally hidden during training
    eval_mask: np.ndarray


@dataclass
class LossBreakdown:
    total: dc.Tensor
    recon_tilde: float
    recon_hat: float
    recon_hat_prime: float
    recon_masked: float
    kld_total: float

    def as_row(self) -> dict:
        return {
            "total": float(self.total.value),
            "recon_tilde": self.recon_tilde,
            "recon_hat": self.recon_hat,
            "recon_hat_prime": self.recon_hat_prime,
            "recon_masked": self.recon_masked,
            "kld": self.kld_total,
        }


def sample_intentional_mask(visible: np.ndarray, ratio: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Pick floor(ratio * #visible) visible entries uniformly without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("ratio must lie in [0, 1)")
    visible = np.asarray(visible, dtype=bool)
    flat = np.flatnonzero(visible)
    n = int(math.floor(ratio * flat.size))
    mask = np.zeros(visible.size, dtype=bool)
    if n:
        mask[rng.choice(flat, size=n, replace=False)] = True
    return mask.reshape(visible.shape)


def _masked_norm(pred: dc.Tensor, target: np.ndarray, mask: np.ndarray,
                 normalize: bool) -> dc.Tensor:
    """Per-sample ||mask * (target - pred)||_F (optionally / mask count), batch mean."""
    m = mask.astype(np.float64)
    resid = dc.mul(dc.sub(target, pred), m)
    axes = tuple(range(1, m.ndim))
    norms = dc.sqrt(dc.sum_(dc.square(resid), axis=axes))
    if normalize:
        counts = m.sum(axis=axes)
        norms = dc.mul(norms, np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0))
    return dc.mean(norms)


def compute_loss(result: ImputationResult, truth: np.ndarray, masks: MaskSet,
                 kld_weight: float = 1.0, normalize: bool = True) -> LossBreakdown:
    """Reconstruction terms on O plus the intentional-mask term and the KL integrals.

    Arrays are (B, T, C). ``truth`` may be NaN outside ``masks.observed``;
    those entries are never read.
    """
    observed = np.asarray(masks.observed, dtype=bool)
    if not observed.any():
        raise ValueError("observed mask is empty; nothing to reconstruct")
    if truth.shape != result.xtilde.shape:
        raise dc.ShapeError("compute_loss", truth.shape, result.xtilde.shape)
    target = np.where(observed, truth, 0.0)
    intentional = np.asarray(masks.intentional, dtype=bool) & observed

    parts = []
    tilde = _masked_norm(result.xtilde, target, observed, normalize)
    parts.append(tilde)
    hat = hat_prime = None
    if result.xhat_prime is not None:
        hat = _masked_norm(result.xhat, target, observed, normalize)
        hat_prime = _masked_norm(result.xhat_prime, target, observed, normalize)
        parts += [hat, hat_prime]
    masked = _masked_norm(result.xtilde, target, intentional, normalize)
    parts.append(masked)
    kld = None
    for k in result.klds:
        term = dc.mean(k)
        kld = term if kld is None else dc.add(kld, term)
    kld = dc.scale(kld, kld_weight)
    parts.append(kld)

    total = parts[0]
    for p in parts[1:]:
        total = dc.add(total, p)
    val = (lambda t: 0.0 if t is None else float(t.value))
    return LossBreakdown(total, val(tilde), val(hat), val(hat_prime), val(masked), val(kld))


@dataclass
class TrainResult:
    best_state: dict
    history: list = field(default_factory=list)
    best_val_mae: float = math.inf
    best_iteration: int = 0


def _stack_truth(samples: Sequence[TimeSeriesSample]) -> np.ndarray:
    return np.stack([s.truth.T for s in samples])


def _validation_mae(chain: Chain, samples, hidden) -> float:
    if not samples:
        return math.nan
    batch = Batch.from_samples(samples, extra_hidden=hidden)
    filled = impute_batch(batch, chain)
    truth = _stack_truth(samples)
    if not hidden.any():
        return math.nan
    return float(np.mean(np.abs(filled[hidden] - truth[hidden])))


def train(train_data: Sequence[TimeSeriesSample], val_data: Sequence[TimeSeriesSample],
          chain: Chain, config: TrainConfig, progress: bool = False) -> TrainResult:
    """Train ``chain`` in place; the returned state is the best-validation one.

    The validation criterion is MAE on a fixed random subset of visible
    validation entries (drawn once per run with ``mask_ratio``), scored in
    inference mode.
    """
    if not train_data:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    params = chain.params()
    opt = dc.OptimizerState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                            eps=config.eps)
    val_data = list(val_data)
    val_hidden = (np.stack([sample_intentional_mask(s.visible_mask.T, config.mask_ratio, rng)
                            for s in val_data]) if val_data else None)
    best = TrainResult(chain.state_dict())
    best.best_val_mae = _validation_mae(chain, val_data, val_hidden) if val_data else math.nan
    if math.isnan(best.best_val_mae):
        best.best_val_mae = math.inf

    last_finite = math.nan
    n_train = len(train_data)
    for it in range(config.max_iter):
        idx = np.sort(rng.choice(n_train, size=min(config.batch_size, n_train), replace=False))
        chosen = [train_data[i] for i in idx]
        visible = np.stack([s.visible_mask.T for s in chosen])
        intentional = np.stack([sample_intentional_mask(v, config.mask_ratio, rng)
                                for v in visible])
        batch = Batch.from_samples(chosen, extra_hidden=intentional)
        masks = MaskSet(visible, intentional, np.stack([s.eval_mask.T for s in chosen]))
        try:
            with dc.Tape() as tape:
                result = chain_forward(batch, chain, mode=TRAIN, seed=rng)
                loss = compute_loss(result, _stack_truth(chosen), masks,
                                    config.kld_weight, config.normalize_loss)
                if not np.isfinite(loss.total.value):
                    raise TrainingDivergence(it, last_finite)
                grads = dc.backward(loss.total, tape, params)
        except DivergenceError as exc:
            raise TrainingDivergence(it, last_finite, str(exc)) from exc
        try:
            dc.adam_step(params, grads, opt)
        except FloatingPointError as exc:
            raise TrainingDivergence(it, last_finite, str(exc)) from exc
        last_finite = float(loss.total.value)

        row = {"iteration": it + 1, **loss.as_row(), "val_mae": math.nan}
        if val_data and ((it + 1) % config.val_every == 0 or it + 1 == config.max_iter):
            mae = _validation_mae(chain, val_data, val_hidden)
            row["val_mae"] = mae
            if mae < best.best_val_mae:
                best.best_val_mae = mae
                best.best_iteration = it + 1
                best.best_state = chain.state_dict()
            if progress:
                log.info("iter %d loss %.5f val_mae %.5f", it + 1, row["total"], mae)
        best.history.append(row)

    if not val_data:
        best.best_state = chain.state_dict()
        best.best_iteration = config.max_iter
    chain.load_state_dict(best.best_state)
    return best


def write_history_csv(path, history: Sequence[dict], comments: dict | None = None) -> None:
    """One row per iteration; ``comments`` become leading ``# key = value`` lines."""
    with open(path, "w", newline="") as fh:
        for key, value in (comments or {}).items():
            fh.write(f"# {key} = {value}\n")
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(float(row[k])) if k != "iteration" else row[k]
                             for k in HISTORY_FIELDS})
