# dge/tensor.py
# Purpose: dense numpy tensors with reverse-mode automatic differentiation.
# Each op records its parents and a closure mapping the output gradient to one
# gradient per parent (None where that parent needs none).

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

from dge.errors import DimensionError, NumericError, UsageError

PRECISIONS = {"f32": np.float32, "f64": np.float64}
LAYER_NORM_EPS = 1e-5

_dtype = np.float32


def set_precision(name: str) -> None:
    global _dtype
    if name not in PRECISIONS:
        raise UsageError(f"unknown precision {name!r}, expected one of {sorted(PRECISIONS)}")
    _dtype = PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    global _dtype
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = previous


# ---- instrumented FLOP tally (2 FLOPs per multiply-accumulate) ----

class FlopCounter:
    def __init__(self) -> None:
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, flops: int) -> None:
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())


_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def record_flops(kind: str, flops: int) -> None:
    for counter in _counters:
        counter.add(kind, flops)


# ---- tensor ----

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @staticmethod
    def _result(data, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = np.asarray(data)
        out.grad = None
        out.name = None
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ---- introspection ----
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), _no_backward, "detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # ---- reverse pass ----
    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # ---- operators ----
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def var(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_var(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _no_backward(g):
    return ()


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def custom(data, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Node with a hand-written backward rule (straight-through estimators)."""
    return Tensor._result(data, parents, backward, op)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what}: input contains NaN or infinite values")


# ---- elementwise ----

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data / b.data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        a.data ** exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return Tensor._result(
        (x * cdf).astype(x.dtype, copy=False), (a,),
        lambda g: ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),), "gelu")


# ---- linear algebra ----

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    record_flops("matmul", 2 * out.size * a.shape[-1])

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


# ---- reductions ----

def _expand_to(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[ax] for ax in axes]))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
        lambda g: (_expand_to(g, a.shape, axis, keepdims),), "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = _reduced_count(a.shape, axis)
    return Tensor._result(
        np.mean(a.data, axis=axis, keepdims=keepdims), (a,),
        lambda g: (_expand_to(g, a.shape, axis, keepdims) / n,), "mean")


def reduce_var(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance."""
    a = as_tensor(a)
    n = _reduced_count(a.shape, axis)
    centered = a.data - np.mean(a.data, axis=axis, keepdims=True)
    return Tensor._result(
        np.var(a.data, axis=axis, keepdims=keepdims), (a,),
        lambda g: (_expand_to(g, a.shape, axis, keepdims) * (2.0 / n) * centered,), "var")


# ---- shape plumbing ----

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return Tensor._result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(a.data[index], (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise UsageError("concat needs at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def take_rows(a, index, fill: bool = False) -> Tensor:
    """Gather rows of `a`. With fill=True an index of -1 yields a zero row."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if fill:
        keep = index >= 0
        out = np.zeros((index.shape[0],) + a.shape[1:], dtype=a.data.dtype)
        out[keep] = a.data[index[keep]]
    else:
        keep = None
        out = a.data[index]

    def backward(g):
        grad = np.zeros_like(a.data)
        if keep is None:
            np.add.at(grad, index, g)
        else:
            np.add.at(grad, index[keep], g[keep])
        return (grad,)

    return Tensor._result(out, (a,), backward, "gather")


def take_along(a, index, axis: int = -1) -> Tensor:
    """Pick one entry per row along `axis`: out[r] = a[r, index[r]]."""
    a = as_tensor(a)
    idx = np.expand_dims(np.asarray(index, dtype=np.intp), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return Tensor._result(np.squeeze(out, axis=axis), (a,), backward, "take_along")


def scatter_add(a, index, num_segments: int) -> Tensor:
    """Sum rows of `a` into `num_segments` buckets; rows with a negative index are dropped."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.shape[0] != a.shape[0]:
        raise DimensionError(f"scatter_add index length {index.shape[0]} does not match rows {a.shape}")
    keep = index >= 0
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(out, index[keep], a.data[keep])

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[keep] = g[index[keep]]
        return (grad,)

    return Tensor._result(out, (a,), backward, "scatter_add")


def segment_mean(a, index, num_segments: int) -> Tensor:
    """Mean of the rows sharing a segment id; empty segments give zero rows."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.shape[0] != a.shape[0]:
        raise DimensionError(f"segment_mean index length {index.shape[0]} does not match rows {a.shape}")
    keep = index >= 0
    counts = np.bincount(index[keep], minlength=num_segments)
    denom = np.maximum(counts, 1).astype(a.data.dtype).reshape((-1,) + (1,) * (a.ndim - 1))
    sums = np.zeros((num_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(sums, index[keep], a.data[keep])
    record_flops("pool", a.data.size)

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[keep] = (g / denom)[index[keep]]
        return (grad,)

    return Tensor._result(sums / denom, (a,), backward, "segment_mean")


# ---- normalizations and probabilities ----

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    out = special.softmax(a.data, axis=axis).astype(a.data.dtype, copy=False)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax")
    out = special.log_softmax(a.data, axis=axis).astype(a.data.dtype, copy=False)
    probs = np.exp(out)

    def backward(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    channels = x.shape[-1]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match channels {channels}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.var(x.data, axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv_std * (gxhat - np.mean(gxhat, axis=-1, keepdims=True)
                        - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        ggain = np.sum((g * xhat).reshape(-1, channels), axis=0)
        gbias = np.sum(g.reshape(-1, channels), axis=0)
        return gx, ggain, gbias

    return Tensor._result(out.astype(x.data.dtype, copy=False), (x, gain, bias), backward, "layer_norm")


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward emits `hard`; backward hands the incoming gradient to `soft` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=soft.data.dtype).reshape(soft.shape)
    return Tensor._result(hard, (soft,), lambda g: (g,), "straight_through")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood; logits (K,) with an int label or (B, K) with B labels."""
    logits = as_tensor(logits)
    lsm = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return -getitem(lsm, int(labels))
    picked = take_along(lsm, np.asarray(labels, dtype=np.intp), axis=-1)
    return -reduce_mean(picked)
