"""Define-by-run reverse-mode autodiff over dense float64 matrices.

Every quantity is a 2-D array. Column vectors are ``(n, 1)``; a batch of
column vectors is ``(n, batch)``. A :class:`Tape` records each operation as it
runs, and :meth:`Tape.backward` sweeps the record in reverse to fill adjoints.
Parameters are leaf values that outlive any single tape; their adjoints
accumulate until an optimizer step consumes and clears them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class Value:
    """A node: forward data plus a lazily allocated adjoint of the same shape."""

    __slots__ = ("data", "_grad", "node_id", "name")

    def __init__(self, data, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ShapeError(f"Value needs a matrix, got ndim={arr.ndim}")
        self.data = arr
        self._grad = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = None if g is None else np.asarray(g, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape})"


def parameter(data, name: str = "") -> Value:
    return Value(data, name=name)


@dataclass
class Entry:
    kind: str
    inputs: tuple[Value, ...]
    output: Value
    attrs: dict = field(default_factory=dict)


# --- op table -----------------------------------------------------------------
# Each op is (check, forward, vjp). forward(xs, attrs) -> out;
# vjp(g, xs, out, attrs) -> one adjoint per input (None means no contribution).


def _same_shape(kind, xs, attrs):
    if xs[0].shape != xs[1].shape:
        raise ShapeError(f"{kind}: shapes {xs[0].shape} and {xs[1].shape} differ")


def _unary(kind, xs, attrs):
    pass


def _check_matmul(kind, xs, attrs):
    a, b = xs
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")


def _check_add_bias(kind, xs, attrs):
    a, b = xs
    if b.shape != (a.shape[0], 1):
        raise ShapeError(f"add-bias: bias {b.shape} does not fit {a.shape}")


def _check_concat(kind, xs, attrs):
    cols = {x.shape[1] for x in xs}
    if len(cols) != 1:
        raise ShapeError(f"concat-rows: column counts differ {[x.shape for x in xs]}")


def _check_slice(kind, xs, attrs):
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= xs[0].shape[0]:
        raise ShapeError(f"slice-rows: [{start}:{stop}] out of range for {xs[0].shape}")


def _softmax_cols(x):
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _log_softmax_cols(x):
    z = x - x.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _fwd_concat(xs, attrs):
    return np.concatenate(xs, axis=0)


def _vjp_concat(g, xs, out, attrs):
    grads, row = [], 0
    for x in xs:
        n = x.shape[0]
        grads.append(g[row:row + n])
        row += n
    return grads


def _vjp_softmax(g, xs, out, attrs):
    return [out * (g - (g * out).sum(axis=0, keepdims=True))]


def _vjp_log_softmax(g, xs, out, attrs):
    p = np.exp(out)
    return [g - p * g.sum(axis=0, keepdims=True)]


def _vjp_slice(g, xs, out, attrs):
    full = np.zeros_like(xs[0])
    full[attrs["start"]:attrs["stop"]] = g
    return [full]


_OPS: dict[str, tuple[Callable, Callable, Callable]] = {
    "add": (
        _same_shape,
        lambda xs, at: xs[0] + xs[1],
        lambda g, xs, out, at: [g, g],
    ),
    "add-bias": (
        _check_add_bias,
        lambda xs, at: xs[0] + xs[1],
        lambda g, xs, out, at: [g, g.sum(axis=1, keepdims=True)],
    ),
    "mul": (
        _same_shape,
        lambda xs, at: xs[0] * xs[1],
        lambda g, xs, out, at: [g * xs[1], g * xs[0]],
    ),
    "matmul": (
        _check_matmul,
        lambda xs, at: xs[0] @ xs[1],
        lambda g, xs, out, at: [g @ xs[1].T, xs[0].T @ g],
    ),
    "transpose": (
        _unary,
        lambda xs, at: xs[0].T.copy(),
        lambda g, xs, out, at: [g.T],
    ),
    "concat-rows": (_check_concat, _fwd_concat, _vjp_concat),
    "slice-rows": (
        _check_slice,
        lambda xs, at: xs[0][at["start"]:at["stop"]].copy(),
        _vjp_slice,
    ),
    "sigmoid": (
        _unary,
        lambda xs, at: _sigmoid(xs[0]),
        lambda g, xs, out, at: [g * out * (1.0 - out)],
    ),
    "tanh": (
        _unary,
        lambda xs, at: np.tanh(xs[0]),
        lambda g, xs, out, at: [g * (1.0 - out * out)],
    ),
    "softmax": (_unary, lambda xs, at: _softmax_cols(xs[0]), _vjp_softmax),
    "log-softmax": (_unary, lambda xs, at: _log_softmax_cols(xs[0]), _vjp_log_softmax),
    "log": (
        _unary,
        lambda xs, at: np.log(xs[0]),
        lambda g, xs, out, at: [g / xs[0]],
    ),
    "log-sigmoid": (
        _unary,
        lambda xs, at: _log_sigmoid(xs[0]),
        lambda g, xs, out, at: [g * _sigmoid(-xs[0])],
    ),
    "mean": (
        _unary,
        lambda xs, at: np.array([[xs[0].mean()]]),
        lambda g, xs, out, at: [np.full_like(xs[0], g[0, 0] / xs[0].size)],
    ),
    "sum": (
        _unary,
        lambda xs, at: np.array([[xs[0].sum()]]),
        lambda g, xs, out, at: [np.full_like(xs[0], g[0, 0])],
    ),
    "scale": (
        _unary,
        lambda xs, at: xs[0] * at["c"],
        lambda g, xs, out, at: [g * at["c"]],
    ),
    # column-wise dot product: (n, k) . (n, k) -> (1, k)
    "dot": (
        _same_shape,
        lambda xs, at: (xs[0] * xs[1]).sum(axis=0, keepdims=True),
        lambda g, xs, out, at: [g * xs[1], g * xs[0]],
    ),
}

OP_KINDS = tuple(_OPS)


class Tape:
    """Ordered record of operations for one forward pass.

    With ``grad=False`` nothing is recorded, which is the inference path.
    """

    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self.entries: list[Entry] = []

    def record(self, kind: str, *inputs: Value, **attrs) -> Value:
        try:
            check, forward, _ = _OPS[kind]
        except KeyError:
            raise ValueError(f"unknown op kind {kind!r}") from None
        xs = [v.data for v in inputs]
        check(kind, xs, attrs)
        out = Value.__new__(Value)
        out.data = forward(xs, attrs)
        out._grad = None
        out.node_id = next(_ids)
        out.name = ""
        if self.grad_enabled:
            self.entries.append(Entry(kind, inputs, out, attrs))
        return out

    def backward(self, loss: Value) -> None:
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")
        if not self.grad_enabled:
            raise RuntimeError("tape was built with grad=False")
        loss._grad = np.ones((1, 1))
        for entry in reversed(self.entries):
            g = entry.output._grad
            if g is None:
                continue
            vjp = _OPS[entry.kind][2]
            xs = [v.data for v in entry.inputs]
            for v, gv in zip(entry.inputs, vjp(g, xs, entry.output.data, entry.attrs)):
                if gv is None:
                    continue
                # never in place: vjps may hand the same array to several inputs
                v._grad = gv if v._grad is None else v._grad + gv

    # convenience wrappers ------------------------------------------------------

    def constant(self, data, name: str = "") -> Value:
        return Value(data, name=name)

    def add(self, a, b):
        return self.record("add", a, b)

    def add_bias(self, a, b):
        return self.record("add-bias", a, b)

    def mul(self, a, b):
        return self.record("mul", a, b)

    def matmul(self, a, b):
        return self.record("matmul", a, b)

    def transpose(self, a):
        return self.record("transpose", a)

    def concat_rows(self, *xs):
        return self.record("concat-rows", *xs)

    def slice_rows(self, a, start, stop):
        return self.record("slice-rows", a, start=start, stop=stop)

    def sigmoid(self, a):
        return self.record("sigmoid", a)

    def tanh(self, a):
        return self.record("tanh", a)

    def softmax(self, a):
        return self.record("softmax", a)

    def log_softmax(self, a):
        return self.record("log-softmax", a)

    def log(self, a):
        return self.record("log", a)

    def log_sigmoid(self, a):
        return self.record("log-sigmoid", a)

    def mean(self, a):
        return self.record("mean", a)

    def sum(self, a):
        return self.record("sum", a)

    def scale(self, a, c: float):
        return self.record("scale", a, c=float(c))

    def dot(self, a, b):
        return self.record("dot", a, b)

    def add_n(self, xs: Sequence[Value]) -> Value:
        out = xs[0]
        for x in xs[1:]:
            out = self.add(out, x)
        return out


# --- optimisation ---------------------------------------------------------------


def global_norm(params: Sequence[Value]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p._grad is not None)))


def clip_grads(params: Sequence[Value], max_norm: float) -> float:
    """Rescale all adjoints so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p._grad is not None:
                p._grad = p._grad * factor
    return norm


class AdamState:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}


def sgd_step(params: Sequence[Value], lr: float, adam: AdamState | None = None,
             max_norm: float | None = None) -> None:
    """Apply one update and zero the adjoints.

    Plain SGD unless an :class:`AdamState` is attached, in which case the Adam
    recurrence with bias correction is used.
    """
    if max_norm is not None:
        clip_grads(params, max_norm)
    if adam is not None:
        adam.t += 1
        c1 = 1.0 - adam.beta1 ** adam.t
        c2 = 1.0 - adam.beta2 ** adam.t
    for p in params:
        g = p._grad
        if g is None:
            if adam is None:
                continue
            g = np.zeros_like(p.data)
        if adam is None:
            p.data = p.data - lr * g
        else:
            key = p.node_id
            m = adam.m.get(key)
            v = adam.v.get(key)
            m = (1 - adam.beta1) * g if m is None else adam.beta1 * m + (1 - adam.beta1) * g
            v = (1 - adam.beta2) * g * g if v is None else adam.beta2 * v + (1 - adam.beta2) * g * g
            adam.m[key], adam.v[key] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
        p._grad = None


class Optimizer:
    """Bundles a parameter list with its update rule and clipping."""

    def __init__(self, params: Sequence[Value], kind: str = "adam", lr: float = 1e-3,
                 max_norm: float | None = 5.0):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.lr = lr
        self.max_norm = max_norm
        self.adam = AdamState() if kind == "adam" else None

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.adam, self.max_norm)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
