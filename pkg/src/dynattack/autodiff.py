"""Dense float64 tensors with a reverse-mode gradient tape.

Every primitive returns a :class:`Tensor`. When at least one operand requires a
gradient the result carries an :class:`Op` record holding its inputs and a
closure mapping the output gradient to input gradients. Op ids come from a
monotone counter, so sorting the ops reachable from a loss by id gives a
topological order; :class:`Tape` is that ordered record.

Graphs are never cached. Each forward pass builds fresh ops.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_op_ids = itertools.count()


class NonFiniteError(ArithmeticError):
    """Raised when a forward value or a gradient contains NaN or Inf."""


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


@dataclass(eq=False)
class Op:
    name: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]
    id: int = field(default_factory=lambda: next(_op_ids))


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _op: Op | None = None):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, _op.name if _op is not None else "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad or _op is not None)
        self.grad: np.ndarray | None = None
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
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
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, name: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor(data, _op=Op(name, tuple(inputs), backward_fn))
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=DTYPE)
    _check_finite(arr, name)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out._op = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return _result(out, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    return _result(out, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    return _result(out, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / b.data**2, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    # sign(0) = 0 subgradient
    a = as_tensor(a)
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    # derivative at exactly 0 is 0
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(np.asarray(a.data, dtype=DTYPE).reshape(a.shape))
    return _result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the value was inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, "sum", (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, "mean", (a,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {a.shape} -> {shape}") from exc
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, "slice", (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, "concat", tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(out, "stack", tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Rows of a 2D tensor by integer index; index -1 yields a zero row.

    ``index`` may have any shape; the result has shape ``index.shape + (D,)``.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects 2D input, got {a.shape}")
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = a.data[safe] * valid[..., None]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        g2 = (g * valid[..., None]).reshape(-1, a.shape[1])
        np.add.at(full, safe.reshape(-1), g2)
        return (full,)

    return _result(out, "gather_rows", (a,), bw)


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` (leading axis) into ``num_segments`` buckets."""
    a = as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape != a.shape[:1]:
        raise ShapeError("segment ids must match the leading axis")
    out = np.zeros((num_segments,) + a.shape[1:], dtype=DTYPE)
    np.add.at(out, segment_ids, a.data)
    return _result(out, "segment_sum", (a,), lambda g: (g[segment_ids],))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, "matmul", (a, b), bw)


def conv2d(x, w, b=None, padding: int | None = None) -> Tensor:
    """Dense 2D cross-correlation, NCHW input, weight (out, in, k, k), stride 1.

    Zero padding defaults to ``k // 2`` so spatial size is preserved.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape}, weight {w.shape}")
    k = w.shape[2]
    pad = k // 2 if padding is None else padding
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C*k*k)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * k * k)
    wmat = w.data.reshape(w.shape[0], -1)
    out = cols @ wmat.T
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs.append(b)
    out = out.transpose(0, 3, 1, 2)

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)  # B, Ho, Wo, O
        gw = (gt.reshape(-1, gt.shape[-1]).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        gcols = (gt @ wmat).reshape(B, Ho, Wo, C, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + Ho, j:j + Wo] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(gt.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _result(np.ascontiguousarray(out), "conv2d", inputs, bw)


def sparse_conv(features, neighbors: np.ndarray, w, b=None) -> Tensor:
    """Gather-based convolution over an index table.

    ``features``: (M_in, D); ``neighbors``: (M_out, K) int rows into features,
    -1 where the kernel offset hits an empty site; ``w``: (K, D_out, D).
    Output row m is ``sum_k w[k] @ features[neighbors[m, k]] + b``.
    """
    features, w = as_tensor(features), as_tensor(w)
    K, Dout, D = w.shape
    if neighbors.ndim != 2 or neighbors.shape[1] != K or features.shape[1] != D:
        raise ShapeError(f"sparse_conv: features {features.shape}, table {neighbors.shape}, weight {w.shape}")
    gathered = gather_rows(features, neighbors)  # (M_out, K, D)
    flat = reshape(gathered, (neighbors.shape[0], K * D))
    wmat = reshape(transpose(w, (0, 2, 1)), (K * D, Dout))
    out = matmul(flat, wmat)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------- losses

def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (logits,), bw)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of (N, C) logits against integer labels.

    A 1D logits vector is treated as a single row.
    """
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross entropy: logits {logits.shape}, labels {labels.shape}")
    lp = log_softmax(logits, axis=1)
    picked = getitem(lp, (np.arange(labels.shape[0]), labels))
    total = neg(tsum(picked))
    if reduction == "sum":
        return total
    if reduction == "mean":
        return mul(total, 1.0 / labels.shape[0])
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- backward

class Tape:
    """Ops reachable from a loss, in recording order (inputs first)."""

    def __init__(self, ops: list[Op]):
        self.ops = ops

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        ops: list[Op] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            op = t._op
            if op is None or op.id in seen:
                continue
            seen.add(op.id)
            ops.append(op)
            stack.extend(op.inputs)
        ops.sort(key=lambda o: o.id)
        return cls(ops)

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor, inputs: Sequence[Tensor] = ()) -> Tape:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated across calls. Tensors in
    ``inputs`` that the loss does not reach get an exact zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_loss(loss)
    grads: dict = {_key(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict = {}
    for op in reversed(tape.ops):
        g = grads.pop(op.id, None)
        if g is None:
            continue
        in_grads = op.backward(g)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = _key(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=DTYPE)
            if t.is_leaf:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        _check_finite(g, "gradient")
        t.grad = g.reshape(t.shape)
    for t in inputs:
        if _key(t) not in leaves:
            t.grad = np.zeros(t.shape, dtype=DTYPE)
    return tape


def _key(t: Tensor):
    # op ids for interior nodes, object ids (as tuples, never colliding) for leaves
    return t._op.id if t._op is not None else ("leaf", id(t))
