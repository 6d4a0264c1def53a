"""Dense float64 tensors with tape-based reverse-mode autodiff.

The op set is exactly what the block-causal denoiser and the training
losses need: (batched) matmul, embedding lookup, layer norm, GELU, masked
softmax, log-softmax, clamp, sigmoid family, and indexed reductions.
Every op checks its output for non-finite values and raises
FloatingPointError instead of letting inf/NaN propagate into a loss.

Gradients are recorded on an explicit :class:`Tape`. Executing ops inside a
``with Tape() as tape:`` block appends adjoint closures in execution order;
:func:`backward` replays them once, in exact reverse order, accumulating
into the ``grad`` buffer of every ``requires_grad`` leaf. Tensors created
outside a tape are plain immutable values.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, StateError

Array = np.ndarray

_active_tape: "Tape | None" = None


def _check_finite(arr: Array, op: str) -> Array:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: produced a non-finite value")
    return arr


class Tensor:
    """Row-major float64 array, optionally carrying a same-shape grad buffer."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _check_finite(
            np.ascontiguousarray(data, dtype=np.float64), "tensor"
        )
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed ops, consumable exactly once by backward()."""

    def __init__(self):
        self._records: list[
            tuple[Tensor, Callable[[Array], list[tuple[Tensor, Array]]]]
        ] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise StateError("another tape is already active")
        if self.consumed:
            raise StateError("tape was already consumed")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        global _active_tape
        _active_tape = None
        return False

    def __len__(self) -> int:
        return len(self._records)


def _emit(
    out_data: Array,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[Array], list[tuple[Tensor, Array]]],
    op: str,
) -> Tensor:
    """Build an op output and record its adjoint on the active tape if needed."""
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(np.ascontiguousarray(out_data, dtype=np.float64), op)
    out.requires_grad = False
    out.grad = None
    out.tape = None
    tape = _active_tape
    if tape is not None and any(t.requires_grad or t.tape is tape for t in inputs):
        out.tape = tape
        tape._records.append((out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf under `tape`.

    The tape is consumed; a second call raises StateError. A loss that was
    not produced under the tape (a constant) leaves all grads untouched.
    """
    if loss.data.size != 1:
        raise ContractError("backward expects a scalar loss")
    if tape.consumed:
        raise StateError("tape already consumed by a previous backward pass")
    tape.consumed = True
    if loss.tape is not tape:
        return
    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for out, fn in reversed(tape._records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for t, contrib in fn(g):
            if t.requires_grad:
                t.grad += contrib
            elif t.tape is tape:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + contrib
                else:
                    pending[key] = contrib


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise / broadcast ops
# ---------------------------------------------------------------------------


def _trailing_broadcast_axes(a: Tensor, b: Tensor) -> tuple[int, ...]:
    """Axes of `a` over which grads of trailing-broadcast `b` must be summed."""
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim :] != b.shape:
        raise DimensionError(f"cannot broadcast {b.shape} against {a.shape}")
    return tuple(range(a.ndim - b.ndim))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def bwd(g: Array):
            return [(a, g), (b, g)]
    else:
        lead = _trailing_broadcast_axes(a, b)

        def bwd(g: Array):
            return [(a, g), (b, g.sum(axis=lead))]

    return _emit(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def bwd(g: Array):
            return [(a, g), (b, -g)]
    else:
        lead = _trailing_broadcast_axes(a, b)

        def bwd(g: Array):
            return [(a, g), (b, -g.sum(axis=lead))]

    return _emit(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g: Array):
        return [(a, g * bd), (b, g * ad)]

    return _emit(ad * bd, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g: Array):
        return [(a, g * c)]

    return _emit(a.data * c, (a,), bwd, "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    if not lo < hi:
        raise DomainError("clamp needs lo < hi")
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g: Array):
        return [(a, g * inside)]

    return _emit(np.clip(a.data, lo, hi), (a,), bwd, "clamp")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports batched `a` against 2-D `b`, or equal batch dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}"
        )
    if bd.ndim == 2:
        def bwd(g: Array):
            ga = np.matmul(g, bd.T)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return [(a, ga), (b, gb)]
    elif ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2]:
        def bwd(g: Array):
            return [
                (a, np.matmul(g, bd.swapaxes(-1, -2))),
                (b, np.matmul(ad.swapaxes(-1, -2), g)),
            ]
    else:
        raise DimensionError(
            f"unsupported matmul batch shapes: {ad.shape} x {bd.shape}"
        )
    return _emit(np.matmul(ad, bd), (a, b), bwd, "matmul")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: table[V, d] indexed by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError("embedding index out of range")
    d = table.shape[1]

    def bwd(g: Array):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, d))
        return [(table, buf)]

    return _emit(table.data[ids], (table,), bwd, "embedding")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def bwd(g: Array):
        return [(a, g.reshape(old))]

    return _emit(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bwd(g: Array):
        return [(a, np.ascontiguousarray(g.transpose(inv)))]

    return _emit(a.data.transpose(axes), (a,), bwd, "transpose")


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd**3)
    th = np.tanh(u)

    def bwd(g: Array):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return [(x, g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du))]

    return _emit(0.5 * xd * (1.0 + th), (x,), bwd, "gelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError("layer_norm gamma/beta must match the last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(xd.ndim - 1))

    def bwd(g: Array):
        dxhat = g * gamma.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return [(x, gx), (gamma, (g * xhat).sum(axis=lead)), (beta, g.sum(axis=lead))]

    return _emit(gamma.data * xhat + beta.data, (x, gamma, beta), bwd, "layer_norm")


def masked_softmax(scores: Tensor, allowed) -> Tensor:
    """Softmax over the last axis restricted to `allowed` (bool, broadcastable).

    Disallowed entries come out exactly zero. Every row must allow at least
    one entry.
    """
    allowed = np.asarray(allowed, dtype=bool)
    if not allowed.any(axis=-1).all():
        raise ContractError("masked_softmax: some row allows no entries")
    shifted = np.where(allowed, scores.data, -np.inf)
    m = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g: Array):
        return [(scores, p * (g - (g * p).sum(axis=-1, keepdims=True)))]

    return _emit(p, (scores,), bwd, "masked_softmax")


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, computed with max-subtraction."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    z = xd - m
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(g: Array):
        return [(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))]

    return _emit(out, (x,), bwd, "log_softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("log_softmax_rows expects a 2-D tensor")
    return log_softmax(x)


def _sigmoid_arr(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_arr(x: Array) -> Array:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_arr(x.data)

    def bwd(g: Array):
        return [(x, g * s * (1.0 - s))]

    return _emit(s, (x,), bwd, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    xd = x.data

    def bwd(g: Array):
        return [(x, g * _sigmoid_arr(xd))]

    return _emit(_softplus_arr(xd), (x,), bwd, "softplus")


def log_sigmoid(x: Tensor) -> Tensor:
    """log sigma(x) = -softplus(-x); never underflows to -inf for finite x."""
    xd = x.data

    def bwd(g: Array):
        return [(x, g * _sigmoid_arr(-xd))]

    return _emit(-_softplus_arr(-xd), (x,), bwd, "log_sigmoid")


def log_one_minus_sigmoid(x: Tensor) -> Tensor:
    """log(1 - sigma(x)) = -softplus(x)."""
    xd = x.data

    def bwd(g: Array):
        return [(x, -g * _sigmoid_arr(xd))]

    return _emit(-_softplus_arr(xd), (x,), bwd, "log_one_minus_sigmoid")


def sigmoid_and_logsigmoid(x: Tensor) -> tuple[Tensor, Tensor]:
    """Return (sigma(x), log sigma(x)) via the numerically stable branches."""
    if x.data.size != 1:
        raise ContractError("sigmoid_and_logsigmoid expects a scalar tensor")
    return sigmoid(x), log_sigmoid(x)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g: Array):
        return [(a, np.full_like(ad, float(g.reshape(()))))]

    return _emit(ad.sum(), (a,), bwd, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    ad = a.data
    n = ad.size

    def bwd(g: Array):
        return [(a, np.full_like(ad, float(g.reshape(())) / n))]

    return _emit(ad.mean(), (a,), bwd, "mean_all")


def _as_index(indices, ndim: int) -> tuple[Array, ...]:
    idx = tuple(np.asarray(i, dtype=np.int64) for i in indices)
    if len(idx) != ndim:
        raise DimensionError(f"expected {ndim} index arrays, got {len(idx)}")
    return idx


def gather_sum(a: Tensor, indices, weights=None) -> Tensor:
    """Scalar sum of (optionally weighted) elements a[indices].

    `indices` is one integer array per axis of `a`, numpy fancy-index style.
    Repeated entries accumulate in the gradient.
    """
    idx = _as_index(indices, a.ndim)
    vals = a.data[idx]
    w = np.ones_like(vals) if weights is None else np.asarray(weights, dtype=np.float64)

    def bwd(g: Array):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, w * float(g.reshape(())))
        return [(a, buf)]

    return _emit((w * vals).sum(), (a,), bwd, "gather_sum")


def segment_sum(a: Tensor, indices, seg_ids, n_segments: int, weights=None) -> Tensor:
    """Length-`n_segments` vector of weighted sums of a[indices], grouped by seg_ids."""
    idx = _as_index(indices, a.ndim)
    seg = np.asarray(seg_ids, dtype=np.int64)
    vals = a.data[idx]
    if seg.shape != vals.shape:
        raise DimensionError("segment ids must align with gathered entries")
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise DomainError("segment id out of range")
    w = np.ones_like(vals) if weights is None else np.asarray(weights, dtype=np.float64)
    out = np.zeros(n_segments, dtype=np.float64)
    np.add.at(out, seg, w * vals)

    def bwd(g: Array):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, w * g[seg])
        return [(a, buf)]

    return _emit(out, (a,), bwd, "segment_sum")
