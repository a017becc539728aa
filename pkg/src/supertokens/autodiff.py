"""Small reverse-mode autodiff on top of numpy.

Every value is a float64 :class:`Tensor`. Operations executed while a
:class:`Tape` is active (and touching at least one tensor that requires a
gradient) are appended to that tape; :meth:`Tape.backward` walks the records in
exact reverse order.

Matrix products report their cost to an active :class:`FlopCounter`, which is
how the analytic cost model is validated.
"""
from __future__ import annotations

import builtins
import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "FlopCounter", "ShapeError", "NumericError",
    "tensor", "zeros", "ones",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "take", "concat", "sum", "mean", "amax", "exp", "log", "gelu", "sigmoid",
    "softmax", "log_softmax", "layer_norm", "smooth_l1", "clamp_min",
    "detach", "straight_through", "uncounted", "component",
    "check_gradients", "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand extents do not conform."""


class NumericError(ArithmeticError):
    """NaN or infinite values where finite ones are required."""


_TAPES: list["Tape"] = []
_COUNTERS: list["FlopCounter"] = []


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_derived")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._derived = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations inside are recorded, then call
    :meth:`backward` on a scalar result.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _push(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        for t in inputs:
            if t.requires_grad and not t._derived:
                self.leaves.setdefault(id(t), t)
        self.records.append(_Record(out, inputs, backward))

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(leaf) into every leaf's ``grad`` buffer."""
        if grad is None:
            if output.size != 1:
                raise ShapeError("backward needs a scalar output or an explicit grad")
            grad = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi
        for key, leaf in self.leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if output.requires_grad and not output._derived:
            output.grad = np.asarray(grad, dtype=np.float64)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._derived = True
        _TAPES[-1]._push(out, inputs, backward)
    return out


@dataclass
class FlopCounter:
    """Per-component accumulator of floating point operations.

    Matrix products count 2 FLOPs per multiply-accumulate. Elementwise work is
    only counted where an operation is called with ``count=True``. Nested
    components are keyed by their path, e.g. ``"transformer/mlp"``.
    """

    counts: dict[str, int] = field(default_factory=dict)
    _scope: list[str] = field(default_factory=list)

    def __enter__(self) -> "FlopCounter":
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _COUNTERS.remove(self)

    @contextlib.contextmanager
    def component(self, name: str):
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    def add(self, n: int) -> None:
        key = "/".join(self._scope) if self._scope else "other"
        self.counts[key] = self.counts.get(key, 0) + int(n)

    def under(self, prefix: str) -> int:
        """Total of ``prefix`` and everything nested below it."""
        return builtins.sum(v for k, v in self.counts.items()
                            if k == prefix or k.startswith(prefix + "/"))

    def leaf(self, name: str) -> int:
        """Total of every component path ending in ``name``."""
        return builtins.sum(v for k, v in self.counts.items() if k.split("/")[-1] == name)

    @property
    def total(self) -> int:
        return builtins.sum(self.counts.values())


def component(name: str):
    """Attribute counted FLOPs inside the block to ``name`` (no-op when not counting)."""
    if _COUNTERS:
        return _COUNTERS[-1].component(name)
    return contextlib.nullcontext()


@contextlib.contextmanager
def uncounted():
    """Suspend FLOP counting inside the block."""
    saved = _COUNTERS[:]
    _COUNTERS.clear()
    try:
        yield
    finally:
        _COUNTERS.extend(saved)


def _count(n: int) -> None:
    if _COUNTERS:
        _COUNTERS[-1].add(n)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b, count: bool = False) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data * b.data
    if count:
        _count(out.size)
    return _make(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b, count: bool = False) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data
    if count:
        _count(out.size)
    return _make(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _count(2 * out.size * a.shape[-1])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a, index) -> Tensor:
    """Numpy-style indexing (basic or advanced); gradients scatter-add back."""
    a = _as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)

    def backward(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _make(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def sum(a, axis=None, keepdims: bool = False, count: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    if count:
        _count(a.size)

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis, keepdims), float(n))


def amax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        gi = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gi, axis)
        return (ga,)

    return _make(out, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a, lo: float) -> Tensor:
    a = _as_tensor(a)
    keep = a.data >= lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def detach(a) -> Tensor:
    return Tensor(_as_tensor(a).data)


def straight_through(hard, soft) -> Tensor:
    """Forward value ``hard`` (exactly), gradient routed to ``soft``."""
    soft = _as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through shapes differ: {hard.shape} vs {soft.shape}")
    return _make(hard.copy(), (soft,), lambda g: (g,))


_SQRT_HALF = np.sqrt(0.5)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax: NaN input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("log_softmax: NaN input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


def layer_norm(a, weight, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    a, weight, bias = _as_tensor(a), _as_tensor(weight), _as_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = a.shape[-1]

    def backward(g):
        gx = g * weight.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        gw = _unbroadcast(g * xhat, weight.shape) if weight.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return ga, gw, gb

    return _make(xhat * weight.data + bias.data, (a, weight, bias), backward)


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Mean Smooth-L1 (Huber with slope 1) between two same-shape tensors."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = pred.data - target.data
    ax = np.abs(x)
    small = ax < beta
    loss = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    n = max(x.size, 1)

    def backward(g):
        d = np.where(small, x / beta, np.sign(x)) * (g / n)
        return d, -d

    return _make(np.asarray(loss.sum() / n), (pred, target), backward)


@dataclass
class GradCheckReport:
    max_rel_error: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def check_gradients(f: Callable[..., Tensor], inputs, eps: float = 1e-5,
                    tol: float = 1e-6, floor: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps coordinates whose true derivative is ~0 from being judged by
    round-off alone.
    """
    single = isinstance(inputs, Tensor)
    xs = [inputs] if single else list(inputs)
    for x in xs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = f(*xs)
    tape.backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]
    for a in analytic:
        if not np.all(np.isfinite(a)):
            raise NumericError("check_gradients: non-finite tape gradient")

    numeric = []
    for x in xs:
        num = np.zeros_like(x.data)
        flat, nflat = x.data.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*xs).item()
            flat[i] = orig - eps
            lo = f(*xs).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        numeric.append(num)

    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return GradCheckReport(worst, analytic, numeric, tol)
