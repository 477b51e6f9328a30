"""Minimal reverse-mode differentiation over numpy arrays.

Every forward pass builds a flat list of nodes on the active :class:`Tape`.
Because nodes are appended in execution order, that list is already a
topological order and :func:`backward` just walks it in reverse.

Operations called while no tape is active (or on inputs that do not require
gradients) return plain, unrecorded tensors, which keeps inference cheap.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "as_tensor", "parameter",
    "matmul", "add", "sub", "mul", "scale", "neg", "tanh", "sigmoid", "silu",
    "elu", "exp", "square", "abs_", "sum_", "mean", "sqrt", "concat", "stack",
    "reshape", "take", "OptimizerState", "adam_step", "init_params",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_FORMAT", "CHECKPOINT_VERSION",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.parents = ()
        self.backward_fn = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Records nodes created while it is the active tape.

    Use as a context manager; tapes nest, the innermost one records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.remove(self)
        return False

    def clear(self):
        for node in self.nodes:
            node.grad = None
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _record(value, parents: tuple, backward_fn: Callable) -> Tensor:
    tape = Tape.active()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(value)
    out = Tensor(value, requires_grad=True)
    out.parents = parents
    out.backward_fn = backward_fn
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- binary ops -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.value, b.value)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics (batched over leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul", av.shape, bv.shape)
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError("matmul", av.shape, bv.shape)
    try:
        out2 = a2 @ b2
    except ValueError:
        raise ShapeError("matmul", av.shape, bv.shape) from None
    out = out2
    if bv.ndim == 1:
        out = out[..., 0]
    if av.ndim == 1:
        out = out[..., 0, :] if bv.ndim != 1 else out[..., 0]

    def backward_fn(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(av.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bv.shape)
        return ga, gb

    return _record(out, (a, b), backward_fn)


# -- unary elementwise ops --------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.value)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    s = expit(x)
    return _record(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def elu(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    pos = x > 0
    y = np.where(pos, x, np.expm1(np.minimum(x, 0.0)))
    return _record(y, (a,), lambda g: (g * np.where(pos, 1.0, y + 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _record(y, (a,), lambda g: (g * y,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _record(x * x, (a,), lambda g: (2.0 * g * x,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _record(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0 rather than inf."""
    a = as_tensor(a)
    y = np.sqrt(a.value)

    def backward_fn(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0),)

    return _record(y, (a,), backward_fn)


# -- reductions and structural ops -----------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(out, (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.value.shape[ax] for ax in axes)
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.value.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _record(out, (a,), lambda g: (g.reshape(old),))


def take(a, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)
    shape = a.value.shape
    try:
        out = a.value[idx]
    except IndexError:
        raise ShapeError("slice", shape) from None

    def backward_fn(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record(out, (a,), backward_fn)


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = tuple(as_tensor(x) for x in items)
    try:
        out = np.concatenate([x.value for x in items], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.value.shape for x in items)) from None
    bounds = np.cumsum([x.value.shape[axis] for x in items])[:-1]
    return _record(out, items, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(items: Sequence, axis: int = 0) -> Tensor:
    """Stack equally shaped tensors along a new axis (reshape + concat)."""
    items = [as_tensor(x) for x in items]
    expanded = []
    for x in items:
        shape = list(x.value.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(x, tuple(shape)))
    return concat(expanded, axis=axis)


# -- backward pass ----------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None,
             params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Propagate adjoints from a scalar ``loss`` and return parameter gradients.

    Parameters that did not influence the loss get a zero gradient. The tape
    is cleared afterwards.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    tape = tape if tape is not None else Tape.active()
    if tape is None:
        raise RuntimeError("backward called without a tape")
    params = params or {}
    for p in params.values():
        p.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.value)
        for node in reversed(tape.nodes):
            g = node.grad
            if g is None:
                continue
            node.grad = None
            for parent, gp in zip(node.parents, node.backward_fn(g)):
                if gp is None or not parent.requires_grad:
                    continue
                parent.grad = gp if parent.grad is None else parent.grad + gp
    grads = {}
    for name, p in params.items():
        g = p.grad
        grads[name] = np.zeros_like(p.value) if g is None else np.array(g, dtype=np.float64)
        p.grad = None
    tape.clear()
    return grads


# -- optimizer and initialisation ------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: OptimizerState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].value.shape:
            raise ShapeError(f"adam_step[{name}]", g.shape, params[name].value.shape)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def init_params(shape, fan_in: int, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Uniform samples in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    rng = np.random.default_rng(rng)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = "ctaimpute-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, np.ndarray | Tensor], config: dict | None = None) -> None:
    """Write an ordered list of (name, shape, float64 values) as JSON.

    Values are stored with ``float.hex`` so a round trip is bit exact.
    """
    entries = []
    for name, value in params.items():
        arr = value.value if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "values": [float(x).hex() for x in arr.ravel()],
        })
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config or {},
        "params": entries,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = OrderedDict()
    for entry in doc["params"]:
        vals = np.array([float.fromhex(x) for x in entry["values"]], dtype=np.float64)
        params[entry["name"]] = vals.reshape(entry["shape"])
    return params, doc.get("config", {})
