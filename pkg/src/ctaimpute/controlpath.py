"""Continuous control paths built from partially observed samples.

Each channel gets its own natural cubic spline through the entries that are
visible to the model. Outside a channel's visible span the path is held at
the nearest visible value, so its derivative there is zero.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_banded

_DOMAIN_TOL = 1e-12


@dataclass(eq=False)
class TimeSeriesSample:
    """One multivariate series on its own (possibly irregular) time grid.

    ``truth`` has shape ``(channels, len(times))`` and is NaN wherever the
    source data had no value. ``eval_mask`` marks observed entries withheld
    from the model. Model code should only read :attr:`values`, which is NaN
    at every hidden entry.
    """

    times: np.ndarray
    truth: np.ndarray
    eval_mask: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.truth.ndim != 2 or self.truth.shape[1] != self.times.shape[0]:
            raise ValueError(
                f"values must be (channels, {self.times.shape[0]}), got {self.truth.shape}")
        if self.times.shape[0] < 2:
            raise ValueError("a sample needs at least two observation times")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if self.eval_mask is None:
            self.eval_mask = np.zeros(self.truth.shape, dtype=bool)
        self.eval_mask = np.asarray(self.eval_mask, dtype=bool)
        if self.eval_mask.shape != self.truth.shape:
            raise ValueError("eval_mask shape differs from values shape")
        if np.any(self.eval_mask & ~self.observed_mask):
            raise ValueError("eval_mask must be a subset of the observed mask")

    @property
    def n_channels(self) -> int:
        return self.truth.shape[0]

    @property
    def n_times(self) -> int:
        return self.truth.shape[1]

    @property
    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.truth)

    @property
    def visible_mask(self) -> np.ndarray:
        return self.observed_mask & ~self.eval_mask

    @property
    def values(self) -> np.ndarray:
        """Model-facing view: NaN wherever the entry is missing or held out."""
        return np.where(self.visible_mask, self.truth, np.nan)

    @property
    def scaled_times(self) -> np.ndarray:
        t = self.times
        return (t - t[0]) / (t[-1] - t[0])

    def with_eval_mask(self, eval_mask) -> "TimeSeriesSample":
        return replace(self, eval_mask=np.asarray(eval_mask, dtype=bool).copy())


def natural_cubic_coeffs(knots: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Polynomial coefficients of the natural cubic spline through ``(knots, y)``.

    ``y`` may carry trailing columns, which are splined independently. The
    result has shape ``(len(knots) - 1, 4, *y.shape[1:])`` holding ``a, b, c, d``
    of ``a + b*u + c*u**2 + d*u**3`` with ``u = t - knots[i]``.
    """
    x = np.asarray(knots, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two knots")
    h = np.diff(x).reshape((-1,) + (1,) * (y.ndim - 1))
    slope = np.diff(y, axis=0) / h
    m = np.zeros_like(y)
    if n > 2:
        hv = h.ravel()
        banded = np.zeros((3, n - 2))
        banded[0, 1:] = hv[1:-1]
        banded[1] = 2.0 * (hv[:-1] + hv[1:])
        banded[2, :-1] = hv[1:-1]
        m[1:-1] = solve_banded((1, 1), banded, 6.0 * (slope[1:] - slope[:-1]))
    a = y[:-1]
    b = slope - h * (2.0 * m[:-1] + m[1:]) / 6.0
    c = m[:-1] / 2.0
    d = (m[1:] - m[:-1]) / (6.0 * h)
    return np.stack([a, b, c, d], axis=1)


class ChannelSpline:
    """Natural cubic spline for one channel with constant-hold extrapolation."""

    def __init__(self, knots, values):
        self.knots = np.asarray(knots, dtype=np.float64)
        self.knot_values = np.asarray(values, dtype=np.float64)
        if self.knots.shape[0] == 0:
            raise ValueError("a channel spline needs at least one knot")
        self.coeffs = (natural_cubic_coeffs(self.knots, self.knot_values)
                       if self.knots.shape[0] > 1 else None)

    def _locate(self, t):
        idx = np.searchsorted(self.knots, t, side="right") - 1
        idx = np.clip(idx, 0, self.knots.shape[0] - 2)
        return idx, t - self.knots[idx]

    def _masks(self, t):
        return t < self.knots[0], t > self.knots[-1]

    def value(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.coeffs is None:
            return np.full(t.shape, self.knot_values[0])
        idx, u = self._locate(t)
        a, b, c, d = (self.coeffs[idx, j] for j in range(4))
        out = a + u * (b + u * (c + u * d))
        before, after = self._masks(t)
        out = np.where(before, self.knot_values[0], out)
        return np.where(after, self.knot_values[-1], out)

    def derivative(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.coeffs is None:
            return np.zeros(t.shape)
        idx, u = self._locate(t)
        b, c, d = (self.coeffs[idx, j] for j in (1, 2, 3))
        out = b + u * (2.0 * c + 3.0 * u * d)
        before, after = self._masks(t)
        return np.where(before | after, 0.0, out)

    def second_derivative(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.coeffs is None:
            return np.zeros(t.shape)
        idx, u = self._locate(t)
        out = 2.0 * self.coeffs[idx, 2] + 6.0 * u * self.coeffs[idx, 3]
        before, after = self._masks(t)
        return np.where(before | after, 0.0, out)


class ControlPath:
    """Per-channel splines sharing a global time domain ``[t0, tN]``.

    Evaluating at a scalar ``t`` returns a ``(channels,)`` vector; an array of
    times returns ``(len(t), channels)``.
    """

    def __init__(self, channels: list[ChannelSpline], domain: tuple[float, float]):
        self.channels = channels
        self.domain = (float(domain[0]), float(domain[1]))

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        lo, hi = self.domain
        if np.any(t < lo - _DOMAIN_TOL) or np.any(t > hi + _DOMAIN_TOL):
            raise ValueError(f"t outside control path domain [{lo}, {hi}]")
        return t

    def _eval(self, t, method):
        t = self._check(t)
        cols = [getattr(ch, method)(t) for ch in self.channels]
        return np.stack(cols, axis=-1)

    def value(self, t):
        return self._eval(t, "value")

    def derivative(self, t):
        return self._eval(t, "derivative")

    def second_derivative(self, t):
        return self._eval(t, "second_derivative")


def path_from_values(times, values) -> ControlPath:
    """Spline each row of ``values`` (channels x times) over its non-NaN entries."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    channels = []
    for j, row in enumerate(values):
        keep = ~np.isnan(row)
        if not keep.any():
            raise ValueError(f"channel {j} has no visible entries")
        channels.append(ChannelSpline(times[keep], row[keep]))
    return ControlPath(channels, (times[0], times[-1]))


def build_control_path(sample: TimeSeriesSample) -> ControlPath:
    """Control path over the sample's rescaled [0, 1] time axis."""
    return path_from_values(sample.scaled_times, sample.values)


def path_value(path: ControlPath, t):
    return path.value(t)


def path_derivative(path: ControlPath, t):
    return path.derivative(t)


def spline_operators(knots, eval_times) -> tuple[np.ndarray, np.ndarray]:
    """Linear maps from knot values to spline values and slopes at ``eval_times``.

    For a fully visible series ``y`` (knots x channels) the path value at
    ``eval_times`` is ``V @ y`` and its derivative is ``D @ y``.
    """
    knots = np.asarray(knots, dtype=np.float64)
    t = np.asarray(eval_times, dtype=np.float64)
    if np.any(t < knots[0] - _DOMAIN_TOL) or np.any(t > knots[-1] + _DOMAIN_TOL):
        raise ValueError("evaluation times outside the knot span")
    coeffs = natural_cubic_coeffs(knots, np.eye(knots.shape[0]))
    idx = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, knots.shape[0] - 2)
    u = (t - knots[idx])[:, None]
    a, b, c, d = (coeffs[idx, j] for j in range(4))
    val = a + u * (b + u * (c + u * d))
    der = b + u * (2.0 * c + 3.0 * u * d)
    return val, der
