"""Continuous-time (variational) autoencoder layers and their chaining.

A layer splines its input into a control path, solves the augmented
encoder/decoder ODE over the whole window and reads a reconstruction at
every observation time through a small output head. Chains feed the first
layer's gap-filled output to later layers (with a residual connection) and
blend the first and last reconstructions with a learned sigmoid gate.

Batched arrays are laid out ``(batch, time, channel)``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .controlpath import TimeSeriesSample, path_from_values, spline_operators
from .diffcore import Tensor
from .ncde import (EULER, EncoderDecoder, Linear, VectorField, augmented_rhs,
                   build_step_plan, default_step, initial_state, integrate)

AE = "AE"
VAE = "VAE"
TRAIN = "train"
INFER = "infer"

# Constant used for a channel with no visible entry in a sample. Data are
# z-scored with training statistics, so 0 is the training channel mean.
EMPTY_CHANNEL_FILL = 0.0


@dataclass
class ModelConfig:
    n_channels: int
    latent: int = 8
    decoder: int = 8
    hidden: int = 16
    n_hidden: int = 1
    head_hidden: int = 16
    step: float | None = None
    method: str = EULER
    time_feature: bool = False
    fuse_with_mask: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def parse_chain_spec(spec: str | Sequence[str]) -> list[str]:
    """``"VAE-AE"`` -> ``["VAE", "AE"]``; 1 to 3 layers."""
    parts = spec.split("-") if isinstance(spec, str) else list(spec)
    parts = [p.strip().upper() for p in parts]
    if not 1 <= len(parts) <= 3 or any(p not in (AE, VAE) for p in parts):
        raise ValueError(f"invalid chain spec {spec!r}; expected e.g. 'AE', 'VAE-AE'")
    return parts


class CTALayer:
    """One (V)AE layer: ODE fields, initial-condition maps and output heads."""

    def __init__(self, variant: str, fields: EncoderDecoder, fc1: Linear, fc2: Linear,
                 fc3: Linear | None = None, name: str = "layer0"):
        self.variant = variant
        self.fields = fields
        self.fc1 = fc1
        self.fc2 = fc2
        self.fc3 = fc3
        self.name = name

    @classmethod
    def init(cls, variant: str, cfg: ModelConfig, name: str, fusion: bool,
             rng: np.random.Generator) -> "CTALayer":
        c, dz, dd = cfg.n_channels, cfg.latent, cfg.decoder
        vae = variant == VAE
        n_e = (2 * dz if vae else dz) + (1 if cfg.time_feature else 0)
        g_mu = VectorField.init(n_e, cfg.hidden, cfg.n_hidden, dz, c, f"{name}.g_mu", rng)
        g_sigma = (VectorField.init(n_e, cfg.hidden, cfg.n_hidden, dz, c, f"{name}.g_sigma", rng)
                   if vae else None)
        k = VectorField.init(dd, cfg.hidden, cfg.n_hidden, dd, dz, f"{name}.k", rng)
        fields = EncoderDecoder(
            g_mu=g_mu, k=k,
            fc_mu=Linear.init(c, dz, f"{name}.fc_mu", rng),
            fc_d=Linear.init(c, dd, f"{name}.fc_d", rng),
            g_sigma=g_sigma,
            fc_sigma=Linear.init(c, dz, f"{name}.fc_sigma", rng) if vae else None,
            time_feature=cfg.time_feature,
        )
        fc1 = Linear.init(dd, cfg.head_hidden, f"{name}.fc1", rng)
        fc2 = Linear.init(cfg.head_hidden, c, f"{name}.fc2", rng)
        fc3 = None
        if fusion:
            n_in = dd + (c if cfg.fuse_with_mask else 0)
            fc3 = Linear.init(n_in, c, f"{name}.fc3", rng)
        return cls(variant, fields, fc1, fc2, fc3, name)

    def params(self) -> list[Tensor]:
        out = self.fields.params() + self.fc1.params() + self.fc2.params()
        if self.fc3 is not None:
            out += self.fc3.params()
        return out

    def head(self, d) -> Tensor:
        return self.fc2(dc.elu(self.fc1(d)))


class Chain:
    """A sequence of 1 to 3 CTA layers sharing one :class:`ModelConfig`."""

    def __init__(self, layers: list[CTALayer], cfg: ModelConfig):
        self.layers = layers
        self.cfg = cfg

    @classmethod
    def init(cls, spec, cfg: ModelConfig, seed: int | np.random.Generator = 0) -> "Chain":
        variants = parse_chain_spec(spec)
        rng = np.random.default_rng(seed)
        n = len(variants)
        layers = [CTALayer.init(v, cfg, f"layer{i}", fusion=(n > 1 and i == n - 1), rng=rng)
                  for i, v in enumerate(variants)]
        return cls(layers, cfg)

    @property
    def spec(self) -> str:
        return "-".join(layer.variant for layer in self.layers)

    def params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((p.name, p) for layer in self.layers for p in layer.params())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.value.copy()) for k, v in self.params().items())

    def load_state_dict(self, state) -> None:
        params = self.params()
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise dc.ShapeError(f"load[{name}]", value.shape, p.value.shape)
            p.value = value.copy()


# -- batches ----------------------------------------------------------------

@dataclass
class Batch:
    """Model-facing view of equally long samples; hidden entries are NaN."""

    times: np.ndarray     # (B, T) on [0, 1]
    values: np.ndarray    # (B, T, C)
    observed: np.ndarray  # (B, T, C) bool, ground truth exists

    @classmethod
    def from_samples(cls, samples: Sequence[TimeSeriesSample], extra_hidden=None) -> "Batch":
        lengths = {s.n_times for s in samples}
        if len(lengths) != 1:
            raise ValueError(f"samples in a batch must share a length, got {sorted(lengths)}")
        times = np.stack([s.scaled_times for s in samples])
        values = np.stack([s.values.T for s in samples])
        if extra_hidden is not None:
            values = np.where(np.asarray(extra_hidden, dtype=bool), np.nan, values)
        observed = np.stack([s.observed_mask.T for s in samples])
        return cls(times, values, observed)

    @property
    def size(self) -> int:
        return self.times.shape[0]


@dataclass
class LayerOutput:
    xhat: Tensor       # (B, T, C) head output (before any residual)
    d: Tensor          # (B, T, d_d) decoder states at observation times
    kld: Tensor        # (B,) integral of the KL density, zeros for AE


@dataclass
class ImputationResult:
    xhat: Tensor                 # first layer reconstruction
    xcheck: Tensor | None        # first layer output merged into the input
    xhat_prime: Tensor | None    # last layer output (with residual)
    xtilde: Tensor               # fused output
    alpha: Tensor | None
    klds: list                   # per layer (B,) tensors


def _fill_empty(values: np.ndarray) -> np.ndarray:
    # values: (T, C) for one sample
    empty = np.all(np.isnan(values), axis=0)
    if not empty.any():
        return values
    out = values.copy()
    out[:, empty] = EMPTY_CHANNEL_FILL
    return out


def _control_slopes_from_values(times, values, stage_t):
    """Constant slopes (K, S, B, C) and X(0) (B, C) from NaN-holed inputs."""
    K, S, B = stage_t.shape
    C = values.shape[-1]
    xdot = np.empty((K, S, B, C))
    x0 = np.empty((B, C))
    for b in range(B):
        path = path_from_values(times[b], _fill_empty(values[b]).T)
        x0[b] = path.value(times[b, 0])
        xdot[:, :, b, :] = path.derivative(stage_t[:, :, b].reshape(-1)).reshape(K, S, C)
    return xdot, x0


def _control_slopes_from_tensor(times, x: Tensor, stage_t):
    """Slopes of the spline through a complete (B, T, C) tensor, as a tensor."""
    K, S, B = stage_t.shape
    ops = np.stack([spline_operators(times[b], stage_t[:, :, b].reshape(-1))[1]
                    for b in range(B)])                      # (B, K*S, T)
    slopes = dc.matmul(ops, x)                              # (B, K*S, C)
    return dc.reshape(slopes, (B, K, S, x.shape[-1]))


def layer_forward(layer: CTALayer, times: np.ndarray, inputs, mode: str = INFER,
                  noise: np.ndarray | None = None, step: float | None = None,
                  method: str = EULER) -> LayerOutput:
    """Run one layer over a batch.

    ``inputs`` is either a NaN-holed numpy array (first layer; each channel is
    splined over its visible entries) or a complete tensor (later layers,
    splined over every point so gradients flow through it).
    """
    times = np.asarray(times, dtype=np.float64)
    B, T = times.shape
    if step is None:
        step = default_step(T - 1)
    plan = build_step_plan(times, step)
    stage_t = plan.stage_times(method)
    if isinstance(inputs, Tensor):
        slopes = _control_slopes_from_tensor(times, inputs, stage_t)

        def xdot_at(k, s):
            return slopes[:, k, s]

        x0 = inputs[:, 0]
    else:
        xdot_const, x0 = _control_slopes_from_values(times, np.asarray(inputs), stage_t)

        def xdot_at(k, s):
            return xdot_const[k, s]

    fields = layer.fields
    eps = noise if (mode == TRAIN and fields.variational) else None

    def rhs(state, k, s):
        return augmented_rhs(state, xdot_at(k, s), fields, eps, t=stage_t[k, s])

    outputs = integrate(rhs, initial_state(x0, fields), plan, method)
    d = dc.stack([o.d for o in outputs], axis=1)
    kld = outputs[-1].xi if fields.variational else Tensor(np.zeros(B))
    return LayerOutput(layer.head(d), d, kld)


def nan_replace(inputs: np.ndarray, xhat) -> Tensor:
    """Keep visible input entries, take ``xhat`` wherever the input is NaN."""
    inputs = np.asarray(inputs, dtype=np.float64)
    visible = ~np.isnan(inputs)
    kept = np.where(visible, inputs, 0.0)
    return dc.add(kept, dc.mul((~visible).astype(np.float64), xhat))


def draw_noise(chain: Chain, batch_size: int, rng: np.random.Generator) -> list:
    return [rng.standard_normal((batch_size, chain.cfg.latent)) if layer.variant == VAE else None
            for layer in chain.layers]


def chain_forward(batch: Batch, chain: Chain, mode: str = INFER,
                  seed: int | np.random.Generator | None = None) -> ImputationResult:
    """Full forward pass of a chain; ``seed`` only matters for VAE layers in train mode."""
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}")
    cfg = chain.cfg
    if batch.values.shape[-1] != cfg.n_channels:
        raise ValueError(
            f"expected {cfg.n_channels} channels, got {batch.values.shape[-1]}")
    noises = (draw_noise(chain, batch.size, np.random.default_rng(seed))
              if mode == TRAIN else [None] * len(chain.layers))
    kw = dict(mode=mode, step=cfg.step, method=cfg.method)

    first = layer_forward(chain.layers[0], batch.times, batch.values, noise=noises[0], **kw)
    klds = [first.kld]
    if len(chain.layers) == 1:
        return ImputationResult(first.xhat, None, None, first.xhat, None, klds)

    current = first.xhat
    xcheck0 = None
    last = None
    for layer, noise in zip(chain.layers[1:], noises[1:]):
        xcheck = nan_replace(batch.values, current)
        if xcheck0 is None:
            xcheck0 = xcheck
        last = layer_forward(layer, batch.times, xcheck, noise=noise, **kw)
        klds.append(last.kld)
        current = dc.add(last.xhat, xcheck)

    gate_in = last.d
    if cfg.fuse_with_mask:
        gate_in = dc.concat([last.d, batch.observed.astype(np.float64)], axis=-1)
    alpha = dc.sigmoid(chain.layers[-1].fc3(gate_in))
    xtilde = dc.add(dc.mul(alpha, first.xhat), dc.mul(dc.sub(1.0, alpha), current))
    return ImputationResult(first.xhat, xcheck0, current, xtilde, alpha, klds)


def impute_batch(batch: Batch, chain: Chain) -> np.ndarray:
    """Inference-mode completion of a batch, (B, T, C)."""
    result = chain_forward(batch, chain, mode=INFER)
    return np.where(np.isnan(batch.values), result.xtilde.value, batch.values)


def impute(sample: TimeSeriesSample, chain: Chain, seed=None) -> np.ndarray:
    """Return the sample's model view with every hidden entry filled, (C, T).

    ``seed`` is accepted for interface symmetry; inference uses the mean
    hidden path, so the result does not depend on it.
    """
    out = impute_batch(Batch.from_samples([sample]), chain)[0].T
    return np.where(sample.visible_mask, sample.values, out)


def impute_samples(samples: Sequence[TimeSeriesSample], chain: Chain,
                   batch_size: int = 64) -> list[np.ndarray]:
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        filled = impute_batch(Batch.from_samples(chunk), chain)
        for s, f in zip(chunk, filled):
            out.append(np.where(s.visible_mask, s.values, f.T))
    return out
