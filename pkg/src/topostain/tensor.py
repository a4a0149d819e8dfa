"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad=True`` is recorded
on the active :class:`Tape`. :func:`backward` replays the records of a scalar
loss in reverse creation order, which is a reverse topological order of the
computation graph, and accumulates gradients into the trainable leaves.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> loss = sum_(w * w)
    >>> grads = backward(loss)
    >>> w.grad.tolist()
    [[2.0, 4.0]]
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand lies outside the domain of the function."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (double backward, mixed tapes, ...)."""


_ids = itertools.count()


class Tensor:
    """A float64 array that can participate in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_tape", "_record")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim > 0 and 0 in self.data.shape:
            raise ShapeError(f"empty dimension in shape {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._tape: Tape | None = None
        self._record: _Record | None = None

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
    def is_leaf(self) -> bool:
        return self._record is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward_fn", "consumed", "replays")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.consumed = False
        self.replays = 0


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager to isolate one forward/backward pass::

        with Tape() as tape:
            loss = model(x)
            backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        """Allow the recorded graph to be replayed again."""
        for rec in self.records:
            rec.consumed = False

    def clear(self) -> None:
        self.records.clear()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default = Tape()
        self.enabled = True


_local = _State()


def _state() -> _State:
    return _local


def current_tape() -> Tape:
    st = _state()
    return st.stack[-1] if st.stack else st.default


@contextmanager
def no_grad():
    """Evaluate operations without recording them."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    out._tape = None
    out._record = None
    st = _state()
    out.requires_grad = st.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = current_tape()
        for t in inputs:
            if t._tape is not None and t._tape is not tape:
                raise TapeError(f"{op}: operand was recorded on a different tape")
        rec = _Record(op, tuple(inputs), out, backward_fn)
        tape.records.append(rec)
        out._tape = tape
        out._record = rec
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar loss; returns ``{leaf: gradient}``.

    Gradients are accumulated into ``leaf.grad`` for every trainable leaf the
    loss depends on. Replaying the same records a second time raises
    :class:`TapeError` unless :meth:`Tape.reset` was called in between.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return {loss: loss.grad}

    tape = loss._tape
    records = tape.records
    end = _index_of(records, loss._record)
    needed = {id(loss)}
    live: list[_Record] = []
    for i in range(end, -1, -1):
        rec = records[i]
        if id(rec.output) in needed:
            live.append(rec)
            for t in rec.inputs:
                if t.requires_grad:
                    needed.add(id(t))
    for rec in live:
        if rec.consumed:
            raise TapeError(f"backward through '{rec.op}' a second time without a tape reset")

    grads: dict[int, np.ndarray] = {id(loss): seed}
    leaves: dict[int, Tensor] = {}
    for rec in live:
        g = grads.pop(id(rec.output), None)
        rec.consumed = True
        if g is None:
            continue
        rec.replays += 1
        in_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.is_leaf:
                leaves[key] = t
    out = {}
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
        out[t] = t.grad
    return out


def _index_of(records: list[_Record], rec: _Record) -> int:
    # the target is almost always near the end
    for i in range(len(records) - 1, -1, -1):
        if records[i] is rec:
            return i
    raise TapeError("loss record not found on its tape")


# ---------------------------------------------------------------- broadcasting

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _align(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """A length-N vector against an N×D matrix scales rows."""
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0]:
        return a[:, None], b
    if b.ndim == 1 and a.ndim == 2 and b.shape[0] == a.shape[0]:
        return a, b[:, None]
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def _binary_grads(shape_a, shape_b, ga, gb):
    def fix(g, shape):
        if g is None:
            return None
        if g.ndim == 2 and len(shape) == 1 and g.shape[0] == shape[0] and g.shape[1] != 1:
            return g.sum(axis=1)
        if len(shape) == 1 and g.ndim == 2 and g.shape[1] == 1:
            return g[:, 0]
        return _unbroadcast(g, shape)

    return fix(ga, shape_a), fix(gb, shape_b)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _align(a.data, b.data)

    def bw(g):
        return _binary_grads(a.shape, b.shape, g, g)

    return _make(x + y, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _align(a.data, b.data)

    def bw(g):
        return _binary_grads(a.shape, b.shape, g, -g)

    return _make(x - y, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _align(a.data, b.data)

    def bw(g):
        ga = g * y if a.requires_grad else None
        gb = g * x if b.requires_grad else None
        return _binary_grads(a.shape, b.shape, ga, gb)

    return _make(x * y, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _align(a.data, b.data)
    if np.any(y == 0):
        raise DomainError("division by zero")
    out = x / y

    def bw(g):
        ga = g / y if a.requires_grad else None
        gb = -g * out / y if b.requires_grad else None
        return _binary_grads(a.shape, b.shape, ga, gb)

    return _make(out, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    x = a.data
    return _make(np.log(x), (a,), "log", lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make(out, (a,), "sqrt", bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), "leaky_relu", lambda g: (g * scale,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return _make(out, (a,), "softplus", lambda g: (g * s,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * sign,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_UNARY = {"exp": exp, "log": log, "relu": relu, "tanh": tanh, "neg": neg, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis`` (indices must be unique)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = idx
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), (a,), "take", bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, "concat", bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product of M×K and K×N operands (leading batch axes allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(x @ y, (a, b), "matmul", bw)


def frobenius_norm(a) -> Tensor:
    """sqrt(sum(a²)); the subgradient at zero is taken as zero."""
    a = as_tensor(a)
    x = a.data
    n = float(np.sqrt(np.sum(x * x)))

    def bw(g):
        return (g * x / n if n > 0 else np.zeros_like(x),)

    return _make(np.asarray(n), (a,), "frobenius_norm", bw)


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x / norm

    def bw(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _make(out, (a,), "l2_normalize_rows", bw)


def softmax_cross_entropy_rows(logits, target_index) -> Tensor:
    """Mean over rows of −log softmax(logits)[i, target[i]]."""
    z = as_tensor(logits)
    if z.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {z.shape}")
    n, c = z.shape
    t = np.asarray(target_index, dtype=np.intp)
    if t.shape != (n,):
        raise ShapeError(f"need {n} targets, got shape {t.shape}")
    if np.any(t < 0) or np.any(t >= c):
        raise IndexError("target index out of range")
    m = z.data.max(axis=1, keepdims=True)
    shifted = z.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), (z,), "softmax_cross_entropy_rows", bw)


# ---------------------------------------------------------------- image ops

def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C×H×W or B×C×H×W input, got {x.shape}")
    return x, False


def conv2d(x, kernel, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """2-D cross-correlation of C×H×W (or B×C×H×W) input with an O×C×k×k kernel."""
    x, w = as_tensor(x), as_tensor(kernel)
    xb, squeeze = _as_batch(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"kernel must be O×C×k×k, got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if pad < 0 or stride < 1:
        raise ShapeError("pad must be >= 0 and stride >= 1")
    B, C, H, W = xb.shape
    if w.shape[1] != C:
        raise ShapeError(f"kernel expects {w.shape[1]} channels, input has {C}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv output would be {Ho}×{Wo} for input {H}×{W}")
    xp = np.pad(xb.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb.data
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # B, C·k·k, Ho·Wo columns so the output lands channel-first without a copy
    cols_mat = np.ascontiguousarray(cols.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, Ho * Wo)
    wmat = w.data.reshape(w.shape[0], -1)
    O = w.shape[0]
    out = (wmat @ cols_mat).reshape(B, O, Ho, Wo)

    def bw(g):
        gm = g.reshape(B, O, Ho * Wo)
        gw = None
        if w.requires_grad:
            gw = (gm @ cols_mat.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if xb.requires_grad:
            gcols = (wmat.T @ gm).reshape(B, C, k, k, Ho, Wo)
            gxp = np.zeros(xp.shape)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += gcols[:, :, di, dj]
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw

    y = _make(out, (xb, w), "conv2d", bw)
    if bias is not None:
        y = add(y, reshape(as_tensor(bias), (1, -1, 1, 1)))
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def upsample2x(x) -> Tensor:
    """Nearest-neighbour ×2 upsampling over the last two axes."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    shape = x.shape

    def bw(g):
        g = g.reshape(shape[:-2] + (shape[-2], 2, shape[-1], 2))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (x,), "upsample2x", bw)


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize each channel of each image to zero mean, unit variance."""
    x = as_tensor(x)
    axes = (-2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), "instance_norm", bw)


# ---------------------------------------------------------------- gradient checking

def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the analytic and central-difference gradient.

    The relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    ``coords`` restricts the check to a subset of flat indices.
    """
    x.grad = None
    x.requires_grad = True
    with Tape():
        loss = f(x)
        backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    x.grad = None
    return worst
