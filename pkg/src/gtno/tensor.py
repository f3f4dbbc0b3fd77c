"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (graph attention, the operator model, training) is built
from the primitives in this module. Design constraints:

* float64 everywhere; desk-scale problems make precision cheap and keep test
  tolerances tight,
* every primitive checks its result for NaN/Inf and raises NumericFaultError
  on the first bad value, so faults surface at the op that produced them,
* gradients accumulate with += in a fixed reverse-tape order, so repeated runs
  are bit-identical.

The tape is explicit: ops executed while a Tape is active append (output,
inputs, adjoint) records; backward() walks the active tape in reverse. A
module-level default tape exists so small interactive computations work, but
training code should scope each sample in `with Tape(): ...` to bound memory.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericFaultError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "sqrt",
    "concat",
    "reshape",
    "slice_cols",
    "gather_rows",
    "make_scatter_plan",
    "segment_sum",
    "segment_softmax",
    "softmax",
    "layer_norm",
]


def _check_finite(arr: np.ndarray) -> None:
    # a finite sum certifies every element is finite (NaN and +-Inf both
    # poison the sum); one pass, no temporary bool buffer
    if not np.isfinite(arr.sum()):
        if np.all(np.isfinite(arr)):
            return  # pathological cancellation/overflow of the sum itself
        raise NumericFaultError("non-finite value produced")


class Tape:
    """Ordered record of executed primitives.

    Entering a Tape makes it the active recording target; leaving restores the
    previous one. backward() replays the active tape in reverse.
    """

    __slots__ = ("_nodes",)

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _STACK.pop()
        return False


class no_grad:
    """Context manager that disables recording (eval / numeric probes)."""

    def __enter__(self) -> None:
        _STACK.append(None)

    def __exit__(self, *exc) -> bool:
        _STACK.pop()
        return False


_DEFAULT_TAPE = Tape()
_STACK: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else _DEFAULT_TAPE


class Tensor:
    """float64 ndarray plus grad bookkeeping. Data is C-contiguous."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # reductions as methods; everything else is a module-level function
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=True)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], adjoint: Callable) -> Tensor:
    """Wrap an op result; record on the active tape when grads can flow."""
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape._nodes.append((out, inputs, adjoint))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Seed d(loss)/d(loss)=1 and replay the active tape in reverse.

    Gradients accumulate with += into .grad of every requires_grad tensor the
    loss depends on; tensors not on the path keep grad=None.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward called inside no_grad")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad = loss.grad + np.ones_like(loss.data)
    for out, inputs, adjoint in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        for t, gi in zip(inputs, adjoint(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                # copy: gi may alias the upstream grad or a view of it
                t.grad = np.array(gi, dtype=np.float64)
            else:
                t.grad += gi


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), adjoint)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), adjoint)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), adjoint)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def adjoint(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), adjoint)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Strict 2-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def adjoint(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), adjoint)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose is defined for 2-D tensors")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def adjoint(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), adjoint)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def adjoint(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), adjoint)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    src_shape = a.shape

    def adjoint(g):
        return (g.reshape(src_shape),)

    return _make(np.ascontiguousarray(out), (a,), adjoint)


def concat(tensors: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in ts], axis=-1)
    widths = [t.shape[-1] for t in ts]
    splits = np.cumsum(widths)[:-1]

    def adjoint(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=-1))

    return _make(out, ts, adjoint)


def slice_cols(a, start: int, stop: int) -> Tensor:
    """Contiguous column block a[:, start:stop] of a 2-D tensor."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("slice_cols is defined for 2-D tensors")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError("slice_cols range out of bounds")
    out = a.data[:, start:stop].copy()

    def adjoint(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _make(out, (a,), adjoint)


def make_scatter_plan(index, n_rows: int):
    """Precompute the grouping used by gather_rows' scatter-add adjoint.

    Sorting once turns the scatter into contiguous reduceat sums, which is
    much faster than repeated indexed accumulation when the same index array
    is reused every step (graph edges are).
    """
    idx = np.asarray(index, dtype=np.intp)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    if idx.size == 0:
        starts = np.empty(0, dtype=np.intp)
    else:
        starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
    rows = sorted_idx[starts]
    return order, starts, rows, int(n_rows)


def gather_rows(a, index, plan=None, unique: bool = False) -> Tensor:
    """out[i] = a[index[i]] along axis 0. Adjoint scatter-adds.

    plan: optional make_scatter_plan(index, a.shape[0]) result, reused across
    calls. unique=True asserts the index is duplicate-free (a permutation or
    subset), letting the adjoint assign instead of accumulate.
    """
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = a.data[idx]
    src_shape = a.shape

    if unique:
        def adjoint(g):
            ga = np.zeros(src_shape, dtype=np.float64)
            ga[idx] = g
            return (ga,)
    elif plan is not None:
        order, starts, rows, n_rows = plan

        def adjoint(g):
            ga = np.zeros((n_rows,) + g.shape[1:], dtype=np.float64)
            if starts.size:
                ga[rows] = np.add.reduceat(g[order], starts, axis=0)
            return (ga,)
    else:
        def adjoint(g):
            ga = np.zeros(src_shape, dtype=np.float64)
            np.add.at(ga, idx, g)
            return (ga,)

    return _make(np.ascontiguousarray(out), (a,), adjoint)


def _segment_starts(seg: np.ndarray, num_segments: int, n_rows: int) -> np.ndarray:
    if seg.ndim != 1 or seg.shape[0] != n_rows:
        raise ShapeError("segment ids must be 1-D and match rows")
    if n_rows == 0:
        raise ShapeError("segment ops need at least one row")
    if np.any(np.diff(seg) < 0):
        raise ShapeError("segment ids must be non-decreasing")
    if seg[0] != 0 or seg[-1] != num_segments - 1:
        raise ShapeError("segment ids must cover 0..num_segments-1")
    starts = np.searchsorted(seg, np.arange(num_segments))
    if np.any(np.diff(starts) <= 0):
        raise ShapeError("empty segment")
    return starts


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows sharing a segment id. Ids must be sorted and cover every
    segment (graph neighborhoods guarantee this: every node has a self loop)."""
    a = _as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    starts = _segment_starts(seg, num_segments, a.shape[0])
    out = np.add.reduceat(a.data, starts, axis=0)

    def adjoint(g):
        return (np.ascontiguousarray(g[seg]),)

    return _make(np.ascontiguousarray(out), (a,), adjoint)


def segment_softmax(logits, segment_ids, num_segments: int) -> Tensor:
    """Softmax within each segment, computed with a per-segment max shift.

    Accepts (E,) or (E, k) logits; columns are independent.
    """
    x = _as_tensor(logits)
    seg = np.asarray(segment_ids, dtype=np.intp)
    starts = _segment_starts(seg, num_segments, x.shape[0])
    m = np.maximum.reduceat(x.data, starts, axis=0)
    e = np.exp(x.data - m[seg])
    denom = np.add.reduceat(e, starts, axis=0)
    out = e / denom[seg]

    def adjoint(g):
        dot = np.add.reduceat(out * g, starts, axis=0)
        return (out * (g - dot[seg]),)

    return _make(np.ascontiguousarray(out), (x,), adjoint)


def softmax(a) -> Tensor:
    """Numerically shifted softmax over a 1-D tensor."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise ShapeError("softmax is defined for 1-D tensors")
    e = np.exp(a.data - a.data.max())
    out = e / e.sum()

    def adjoint(g):
        return (out * (g - np.dot(g, out)),)

    return _make(out, (a,), adjoint)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (population
    variance), then scale and shift: y = gain * x_hat + bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must be (last_dim,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def adjoint(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gh = g * gain.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), adjoint)


def _reduce(a: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.sum(axis=axes, keepdims=keepdims)
    if mean:
        out = out / count
    src_shape = a.shape

    def adjoint(g):
        gg = g
        if not keepdims:
            expand = list(src_shape)
            for ax in axes:
                expand[ax] = 1
            gg = gg.reshape(expand)
        gg = np.broadcast_to(gg, src_shape).copy()
        if mean:
            gg /= count
        return (gg,)

    return _make(np.ascontiguousarray(out), (a,), adjoint)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar f against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1e-8, |numeric|).
    x is restored on exit; its .grad is left as the analytic gradient.
    """
    if not x.requires_grad:
        raise ValueError("grad_check input must have requires_grad=True")
    x.grad = None
    with Tape():
        y = f(x)
        if y.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            yp = float(f(x).data.reshape(()))
            flat[i] = orig - step
            ym = float(f(x).data.reshape(()))
            flat[i] = orig
            nflat[i] = (yp - ym) / (2.0 * step)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
