"""NumPy-backed tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active on the current
thread and at least one input requires a gradient, so inference paths carry
no autodiff overhead.

    with Tape() as tape:
        loss = cross_entropy(model_logits, targets)
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_default_dtype = np.dtype(np.float32)
_local = threading.local()


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating-point dtype (process-wide)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations for one thread."""

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.records.append(_Record(out, tuple(inputs), backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf."""
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in self._produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(leaf.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        if id(loss) not in self._produced and loss.requires_grad:
            loss.grad = np.ones_like(loss.data)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on this thread."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=False)
    tape = _active_tape()
    if needs and tape is not None:
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _emit(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


# -- reductions and shape ------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis)), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    w = weight.data

    def back(g):
        gw = np.zeros_like(w)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, w.shape[1]))
        return (gw,)

    return _emit(w[ids], (weight,), back)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with NumPy batch broadcasting."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # fold batch axes into rows: one GEMM instead of a batched loop
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def back(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            return (ga, a2.T @ g2 if b.requires_grad else None)

        return _emit((a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), back)

    # frozen operands (LoRA base weights) skip their gradient product
    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return (ga, gb)

    return _emit(ad @ bd, (a, b), back)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks entries forced to probability 0."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, -np.inf, xd)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), back)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    if gd.shape != (d,):
        raise ShapeError(f"rmsnorm gain shape {gd.shape} does not match feature size {d}")
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * r

    def back(g):
        gg = g * gd
        gx = r * gg - xd * (r**3) * (gg * xd).sum(axis=-1, keepdims=True) / d
        ggain = (g * normed).reshape(-1, d).sum(axis=0)
        return (gx, ggain)

    return _emit(normed * gd, (x, gain), back)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding (rotate-half form) on the last axis."""
    xd = x.data
    half = xd.shape[-1] // 2

    def rot(v):
        return np.concatenate([-v[..., half:], v[..., :half]], axis=-1)

    def rot_t(v):
        return np.concatenate([v[..., half:], -v[..., :half]], axis=-1)

    return _emit(xd * cos + rot(xd) * sin, (x,), lambda g: (g * cos + rot_t(g * sin),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token negative log-likelihood over rows of ``logits``."""
    ld = logits.data
    targets = np.asarray(targets).reshape(-1)
    v = ld.shape[-1]
    flat = ld.reshape(-1, v)
    if flat.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy: {flat.shape[0]} rows vs {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range for vocabulary of {v}")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    n = flat.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return ((p * (g / n)).reshape(ld.shape),)

    return _emit(np.asarray(loss, dtype=ld.dtype), (logits,), back)
