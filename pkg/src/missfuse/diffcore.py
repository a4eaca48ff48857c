"""Dense numpy tensors with a recording tape for reverse-mode gradients.

Only the operations the model needs are provided. Every op returns a new
:class:`Tensor`; when any input requires a gradient the result records its
parents and a closure mapping the output gradient to input gradients.
Calling :meth:`Tensor.backward` on a scalar walks the tape in reverse
topological order and accumulates ``.grad`` on the leaves.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, GradCheckError

NEG_INF = float("-inf")
LN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
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

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    return a, b


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    live = a.data > 0
    return _result(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * live,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only inside the interval."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``. ``cond`` is a constant."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        zero = np.zeros((), dtype=g.dtype)
        return (
            _unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape),
        )

    return _result(out, (a, b), backward)


# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` act as a batch."""
    a, b = _pair(a, b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    k, n = b.shape

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting batched product ``a[..., i, k] @ b[..., k, j]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    src = a.shape
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows along axis 0."""
    rows = np.asarray(rows, dtype=np.intp)
    return getitem(a, rows)


def scatter_rows(a: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """Place the rows of ``a`` at positions ``rows`` of an ``n``-row zero tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + a.shape[1:], dtype=a.dtype)
    out[rows] = a.data
    return _result(out, (a,), lambda g: (g[rows],))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


# reductions


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


# normalisation


def _keep_from_bias(bias, shape) -> np.ndarray:
    bias = np.asarray(bias)
    if bias.dtype == bool:
        keep = bias
    else:
        if np.any(np.isnan(bias)) or np.any(np.isfinite(bias) & (bias != 0)) or np.any(bias == np.inf):
            raise ConfigError("attention bias entries must be 0 or -inf")
        keep = ~np.isneginf(bias)
    return np.broadcast_to(keep, shape)


def masked_softmax(logits: Tensor, bias, axis: int = -1) -> Tensor:
    """Softmax of ``logits + bias`` where bias is 0 (keep) or -inf (drop).

    ``bias`` may also be given directly as a boolean keep-mask. Dropped
    entries come out exactly 0 and receive no gradient; a slice with every
    entry dropped yields all zeros instead of NaN.
    """
    x = logits.data
    keep = _keep_from_bias(bias, x.shape)
    lowest = np.finfo(x.dtype).min
    peak = np.max(np.where(keep, x, lowest), axis=axis, keepdims=True)
    any_keep = np.any(keep, axis=axis, keepdims=True)
    peak = np.where(any_keep, peak, 0)
    # differences among kept entries may overflow to -inf; exp maps that to 0
    with np.errstate(over="ignore"):
        e = np.where(keep, np.exp(np.where(keep, x, peak) - peak), 0).astype(x.dtype)
    total = np.sum(e, axis=axis, keepdims=True)
    out = e / np.where(total > 0, total, 1)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (logits,), backward)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    x = logits.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and shift."""
    d = x.shape[-1]
    if d < 2:
        raise ConfigError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {shift.shape} do not match feature size {d}")
    scale = 1.0 / d
    centred = x.data - x.data.sum(axis=-1, keepdims=True) * scale
    inv = 1.0 / np.sqrt((centred * centred).sum(axis=-1, keepdims=True) * scale + eps)
    xhat = centred * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.sum(axis=-1, keepdims=True) * scale
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) * scale
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, shift), backward)


# verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Compare tape gradients of ``f()`` against central finite differences.

    Returns the maximum over every parameter entry of
    ``|g_tape - g_fd| / max(1, |g_fd|)``. Parameters must be float64 leaves.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 parameters, got {p.dtype}")
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise GradCheckError(f"loss is not finite at the base point: {loss.data}")
    loss.backward()
    worst = 0.0
    for k, p in enumerate(params):
        tape = p.grad if p.grad is not None else np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            with no_grad():
                p.data[idx] = orig + step
                up = float(f().data)
                p.data[idx] = orig - step
                down = float(f().data)
            p.data[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite loss while perturbing parameter {k} at {idx}")
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(tape[idx] - fd) / max(1.0, abs(fd)))
    return worst


class Linear:
    """Affine map ``x @ w + b`` with ``w`` stored as (in, out)."""

    __slots__ = ("w", "b")

    def __init__(self, w: Tensor, b: Tensor):
        self.w = w
        self.b = b

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> "Linear":
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        b = rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w), ("b", self.b)]


class StackedLinear:
    """One affine map per modality: ``w`` is (M, in, out), ``b`` is (M, out).

    Applied to modality-major input ``x[M, ..., in]``; the leading axis picks
    the map.
    """

    __slots__ = ("w", "b")

    def __init__(self, w: Tensor, b: Tensor):
        self.w = w
        self.b = b

    @classmethod
    def init(cls, count: int, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32):
        parts = [Linear.init(fan_in, fan_out, rng, dtype) for _ in range(count)]
        w = np.stack([p.w.data for p in parts])
        b = np.stack([p.b.data for p in parts])
        return cls(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))

    def __call__(self, x: Tensor, index=None) -> Tensor:
        w, b = self.w, self.b
        if index is not None:
            w, b = getitem(w, index), getitem(b, index)
        if x.ndim == 2:
            return bmm(reshape(x, (x.shape[0], 1, x.shape[1])), w).reshape(x.shape[0], -1) + b
        lead = x.shape[1:-1]
        flat = reshape(x, (x.shape[0], -1, x.shape[-1])) if len(lead) != 1 else x
        out = bmm(flat, w) + reshape(b, (b.shape[0], 1, b.shape[1]))
        return reshape(out, (x.shape[0],) + lead + (w.shape[-1],))

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w), ("b", self.b)]
