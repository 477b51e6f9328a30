"""Vector fields and the augmented encoder/decoder ODE.

State layout per sample (all batched along a leading axis ``B``):

* ``mu``    encoder mean path, ``(B, d_z)``
* ``sigma`` encoder log-std path, ``(B, d_z)``; ``None`` for vanilla AE layers
* ``d``     decoder state, ``(B, d_d)``
* ``xi``    running integral of the KL density, ``(B,)``; ``None`` for AE

Vector fields return matrices that multiply the control derivative, so e.g.
``dmu/dt = G_mu(e) @ dX/dt`` with ``G_mu(e)`` of shape ``(d_z, channels)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

EULER = "euler"
RK4 = "rk4"


class DivergenceError(FloatingPointError):
    def __init__(self, t, message: str = "non-finite state"):
        self.t = t
        super().__init__(f"{message} at t={t}")


class AugmentedState(NamedTuple):
    mu: Tensor
    sigma: Tensor | None
    d: Tensor
    xi: Tensor | None


class Linear:
    """Affine map ``x @ W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, n_in: int, n_out: int, name: str, rng: np.random.Generator) -> "Linear":
        w = dc.init_params((n_in, n_out), n_in, rng)
        b = dc.init_params((n_out,), n_in, rng)
        return cls(dc.parameter(w, f"{name}.weight"), dc.parameter(b, f"{name}.bias"))

    def __call__(self, x) -> Tensor:
        return dc.add(dc.matmul(x, self.weight), self.bias)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


class VectorField:
    """MLP ``tanh(FC(E_L))`` with ``E_0 = silu(FC(input))`` and ``E_i = silu(FC(E_{i-1}))``.

    ``n_hidden=L`` gives L + 1 SiLU layers (E_0 .. E_L). The final layer is
    reshaped into a ``(rows, cols)`` matrix per sample.
    """

    def __init__(self, layers: list[Linear], rows: int, cols: int):
        if layers[-1].n_out != rows * cols:
            raise dc.ShapeError("vector_field", (layers[-1].n_out,), (rows, cols))
        self.layers = layers
        self.rows = rows
        self.cols = cols

    @classmethod
    def init(cls, n_in: int, width: int, n_hidden: int, rows: int, cols: int,
             name: str, rng: np.random.Generator) -> "VectorField":
        layers = [Linear.init(n_in, width, f"{name}.0", rng)]
        for i in range(n_hidden):
            layers.append(Linear.init(width, width, f"{name}.{i + 1}", rng))
        layers.append(Linear.init(width, rows * cols, f"{name}.out", rng))
        return cls(layers, rows, cols)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    def __call__(self, x) -> Tensor:
        x = dc.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise dc.ShapeError("vector_field", x.shape, (self.n_in,))
        h = x
        for layer in self.layers[:-1]:
            h = dc.silu(layer(h))
        out = dc.tanh(self.layers[-1](h))
        return dc.reshape(out, x.shape[:-1] + (self.rows, self.cols))

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


def field_forward(field: VectorField, state_input) -> Tensor:
    return field(state_input)


def _matvec(matrix: Tensor, vec) -> Tensor:
    # (B, r, c) @ (B, c) -> (B, r)
    vec = dc.as_tensor(vec)
    col = dc.reshape(vec, vec.shape + (1,))
    return dc.reshape(dc.matmul(matrix, col), matrix.shape[:-1])


@dataclass
class EncoderDecoder:
    """Parameters driving one augmented ODE: fields plus initial-condition maps."""

    g_mu: VectorField
    k: VectorField
    fc_mu: Linear
    fc_d: Linear
    g_sigma: VectorField | None = None
    fc_sigma: Linear | None = None
    time_feature: bool = False

    @property
    def variational(self) -> bool:
        return self.g_sigma is not None

    def params(self) -> list[Tensor]:
        out = self.g_mu.params()
        if self.g_sigma is not None:
            out += self.g_sigma.params()
        out += self.k.params() + self.fc_mu.params()
        if self.fc_sigma is not None:
            out += self.fc_sigma.params()
        return out + self.fc_d.params()


def initial_state(x0, fields: EncoderDecoder) -> AugmentedState:
    """mu(0), sigma(0), d(0) as affine maps of X(0); xi(0) = 0."""
    x0 = dc.as_tensor(x0)
    mu = fields.fc_mu(x0)
    d = fields.fc_d(x0)
    if not fields.variational:
        return AugmentedState(mu, None, d, None)
    sigma = fields.fc_sigma(x0)
    return AugmentedState(mu, sigma, d, Tensor(np.zeros(x0.shape[:-1])))


def kld_density(mu: Tensor, sigma: Tensor, exp_sigma: Tensor | None = None) -> Tensor:
    """KL(N(mu, exp(sigma)^2) || N(0, 1)) summed over latent dimensions."""
    if exp_sigma is None:
        exp_sigma = dc.exp(sigma)
    terms = dc.square(exp_sigma) + dc.square(mu) - 1.0 - dc.scale(sigma, 2.0)
    return dc.scale(dc.sum_(terms, axis=-1), 0.5)


def augmented_rhs(state: AugmentedState, xdot, fields: EncoderDecoder,
                  noise=None, t=None) -> AugmentedState:
    """Time derivative of the augmented state given the control slope ``xdot``.

    ``noise`` is the per-sample epsilon for the reparameterised hidden path;
    ``None`` (or zeros) gives the mean path used at inference.
    """
    if fields.variational:
        e = dc.concat([state.mu, state.sigma], axis=-1)
    else:
        e = state.mu
    if fields.time_feature:
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), e.shape[:-1])[..., None]
        e = dc.concat([e, tt], axis=-1)
    dmu = _matvec(fields.g_mu(e), xdot)
    if not fields.variational:
        dd = _matvec(fields.k(state.d), dmu)
        return AugmentedState(dmu, None, dd, None)
    dsigma = _matvec(fields.g_sigma(e), xdot)
    exp_sigma = dc.exp(state.sigma)
    dhidden = dmu
    if noise is not None:
        dhidden = dc.add(dmu, dc.mul(noise, dc.mul(exp_sigma, dsigma)))
    dd = _matvec(fields.k(state.d), dhidden)
    dxi = kld_density(state.mu, state.sigma, exp_sigma)
    return AugmentedState(dmu, dsigma, dd, dxi)


def hidden_path_value(state: AugmentedState, noise=None) -> Tensor:
    """H = mu + eps * exp(sigma) when sampling, else the mean path mu."""
    if state.sigma is None or noise is None:
        return state.mu
    return dc.add(state.mu, dc.mul(noise, dc.exp(state.sigma)))


# -- fixed-step integration -------------------------------------------------

@dataclass
class StepPlan:
    """A batch-aligned fixed-step grid.

    Each sample takes steps of size ``step`` inside every observation
    interval, with a shortened last substep that lands on the next
    observation time. Samples needing fewer substeps in an interval are
    padded with zero-length steps, so all outputs occur at the same step
    index for the whole batch.
    """

    h: np.ndarray          # (K, B) step sizes
    t: np.ndarray          # (K, B) step start times
    out_index: np.ndarray  # (n_outputs,) steps taken before each output

    @property
    def n_steps(self) -> int:
        return self.h.shape[0]

    def stage_times(self, method: str) -> np.ndarray:
        """Times (K, S, B) at which the rhs is evaluated."""
        if method == EULER:
            return self.t[:, None, :]
        if method == RK4:
            half = self.t + 0.5 * self.h
            return np.stack([self.t, half, half, self.t + self.h], axis=1)
        raise ValueError(f"unknown solver method {method!r}")


def build_step_plan(output_times, step: float) -> StepPlan:
    """Plan for output times of shape (B, n) or (n,)."""
    times = np.atleast_2d(np.asarray(output_times, dtype=np.float64))
    if step <= 0:
        raise ValueError("step must be positive")
    if np.any(np.diff(times, axis=1) < 0):
        raise ValueError("output times must be sorted")
    hs, ts, out_index = [], [], [0]
    for i in range(times.shape[1] - 1):
        t0, t1 = times[:, i], times[:, i + 1]
        dt = t1 - t0
        n = np.maximum(1, np.ceil(dt / step - 1e-9)).astype(int)
        for j in range(int(n.max())):
            last = n - 1
            h = np.where(j < last, step, np.where(j == last, dt - step * last, 0.0))
            t = np.where(j <= last, t0 + step * np.minimum(j, last), t1)
            hs.append(h)
            ts.append(t)
        out_index.append(len(hs))
    B = times.shape[0]
    h = np.array(hs).reshape(-1, B)
    t = np.array(ts).reshape(-1, B)
    return StepPlan(h, t, np.array(out_index))


def _axpy(state: tuple, h: np.ndarray, deriv: tuple) -> tuple:
    out = []
    for s, ds in zip(state, deriv):
        if s is None:
            out.append(None)
            continue
        hh = h.reshape(h.shape + (1,) * (s.ndim - 1))
        out.append(dc.add(s, dc.mul(hh, ds)))
    return type(state)(*out) if hasattr(state, "_fields") else tuple(out)


def _finite(state) -> bool:
    return all(s is None or np.all(np.isfinite(s.value)) for s in state)


def integrate(rhs: Callable, state0: tuple, plan: StepPlan, method: str = EULER) -> list:
    """Integrate ``rhs(state, k, stage)`` over ``plan``; return states at outputs.

    ``rhs`` receives the step index ``k`` and stage index (always 0 for Euler)
    so callers can look up precomputed control slopes at
    ``plan.stage_times(method)[k, stage]``.
    """
    if method not in (EULER, RK4):
        raise ValueError(f"unknown solver method {method!r}")
    state = state0
    outputs = [state]
    out_iter = iter(plan.out_index[1:])
    next_out = next(out_iter, None)
    for k in range(plan.n_steps):
        h = plan.h[k]
        if method == EULER:
            state = _axpy(state, h, rhs(state, k, 0))
        else:
            k1 = rhs(state, k, 0)
            k2 = rhs(_axpy(state, 0.5 * h, k1), k, 1)
            k3 = rhs(_axpy(state, 0.5 * h, k2), k, 2)
            k4 = rhs(_axpy(state, h, k3), k, 3)
            incr = tuple(
                None if a is None else
                dc.add(dc.add(a, dc.scale(b, 2.0)), dc.add(dc.scale(c, 2.0), d))
                for a, b, c, d in zip(k1, k2, k3, k4))
            state = _axpy(state, h / 6.0, incr)
        while next_out is not None and next_out == k + 1:
            if not _finite(state):
                raise DivergenceError(float(np.max(plan.t[k] + plan.h[k])))
            outputs.append(state)
            next_out = next(out_iter, None)
    if not _finite(state):
        raise DivergenceError(float(np.max(plan.t[-1] + plan.h[-1])) if plan.n_steps else 0.0)
    return outputs


def euler_solve(state0: AugmentedState, path, fields: EncoderDecoder, noise=None,
                step: float = 0.01, output_times: Sequence[float] = (0.0, 1.0),
                method: str = EULER) -> list[AugmentedState]:
    """Solve the augmented ODE for a single sample driven by ``path``.

    ``state0`` must have a leading batch axis of size 1.
    """
    plan = build_step_plan(np.asarray(output_times, dtype=np.float64)[None, :], step)
    stage_t = plan.stage_times(method)
    xdot = path.derivative(stage_t.reshape(-1)).reshape(stage_t.shape + (-1,))

    def rhs(state, k, stage):
        return augmented_rhs(state, xdot[k, stage], fields, noise, t=stage_t[k, stage])

    return integrate(rhs, state0, plan, method)


def default_step(n_intervals: int) -> float:
    """Default step: a quarter of the mean interval on the rescaled [0, 1] axis."""
    return 1.0 / (4 * max(1, n_intervals))
