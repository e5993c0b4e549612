"""Dense float64 tensors with reverse-mode autodiff over a dynamic tape.

Every differentiable operation computes its value eagerly with numpy and,
when a tape is active, records a closure that maps the output gradient to
input gradients.  The reverse sweep walks the recorded operations in exact
reverse execution order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError, StateError

_TAPES: list["GradientTape"] = []


def _active_tape() -> "GradientTape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Row-major float64 array with an optional gradient buffer.

    Tensors are treated as immutable after construction; the two sanctioned
    exceptions are gradient accumulation into ``grad`` and in-place parameter
    updates done by an optimizer between tapes.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None

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
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        """A constant copy that no tape will follow."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routing goes through the module-level ops.
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return scale(_reduce_sum(self, axis, keepdims), 1.0 / n)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)


class GradientTape:
    """Ordered record of differentiable operations; consumed by one backward pass."""

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def _watches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        if self._consumed:
            raise StateError("cannot record onto a tape that was already consumed")
        if any(self._watches(t) for t in inputs):
            self._ops.append((out, inputs, fn))
            self._tracked.add(id(out))

    def __len__(self) -> int:
        return len(self._ops)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced or stretched."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: GradientTape) -> None:
    """Populate grad buffers of every trainable tensor reachable from ``loss``.

    Trainable tensors that the loss does not depend on keep their (zeroed)
    buffers untouched.  The tape is consumed; a second call raises.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("backward expects a scalar loss tensor")
    if tape._consumed:
        raise StateError("tape already consumed by a previous backward pass")
    if id(loss) not in tape._tracked:
        raise ValueError("loss was not produced under this tape")
    tape._consumed = True

    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape._ops):
        g = flows.pop(id(out), None)
        if g is None:
            continue
        for t, contrib in zip(inputs, fn(g)):
            if contrib is None:
                continue
            if t.requires_grad:
                t.grad += contrib
            if id(t) in tape._tracked:
                prev = flows.get(id(t))
                flows[id(t)] = contrib if prev is None else prev + contrib


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), fn)


def add_broadcast(x: Tensor, m: Tensor) -> Tensor:
    """Add matrix/vector ``m`` across the leading batch axes of ``x``."""
    x, m = as_tensor(x), as_tensor(m)
    if m.ndim > x.ndim or m.shape != x.shape[x.ndim - m.ndim:]:
        raise DimensionError(f"add_broadcast: cannot add {m.shape} across {x.shape}")
    return add(x, m)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c)

    def fn(g):
        return (g * c,)

    return _record(out, (x,), fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}") from exc
    out = Tensor(data)

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record(out, (a, b), fn)


def outer(u: Tensor, v: Tensor) -> Tensor:
    """Outer product of two vectors: (r,) x (H,) -> (r, H); rank 1 by construction."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError(f"outer expects vectors, got {u.shape} and {v.shape}")
    out = Tensor(np.outer(u.data, v.data))

    def fn(g):
        return g @ v.data, u.data @ g

    return _record(out, (u, v), fn)


def scaled_dot(a: Tensor, b: Tensor) -> Tensor:
    """a . b^T / sqrt(H) along the last axis; the attention logit kernel."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"scaled_dot: feature axes differ {a.shape} vs {b.shape}")
    inv = 1.0 / np.sqrt(a.shape[-1])
    out = Tensor((a.data @ np.swapaxes(b.data, -1, -2)) * inv)

    def fn(g):
        ga = _unbroadcast((g @ b.data) * inv, a.data.shape)
        gb = _unbroadcast((np.swapaxes(g, -1, -2) @ a.data) * inv, b.data.shape)
        return ga, gb

    return _record(out, (a, b), fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def fn(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))

    def fn(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def fn(g):
        buf = np.zeros_like(x.data)
        buf[idx] = g
        return (buf,)

    return _record(out, (x,), fn)


def tile_leading(x: Tensor, reps: int) -> Tensor:
    """Repeat ``x`` along a new leading axis; gradient sums the copies."""
    x = as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, (reps,) + x.data.shape))

    def fn(g):
        return (g.sum(axis=0),)

    return _record(out, (x,), fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ids; gradient scatter-adds."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def fn(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (buf,)

    return _record(out, (table,), fn)


def _reduce_sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * x.ndim), x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _record(out, (x,), fn)


def dot(u: Tensor, v: Tensor) -> Tensor:
    """Inner product of two vectors, as a scalar tensor."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"dot expects equal-length vectors, got {u.shape} and {v.shape}")
    return mul(u, v).sum()


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)

    def fn(g):
        return (g * (1.0 - y * y),)

    return _record(out, (x,), fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth GELU (tanh form)."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + t))

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * dy,)

    return _record(out, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gamma/beta must be ({x.shape[-1]},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data)
    d = x.shape[-1]

    def fn(g):
        dxhat = g * gamma.data
        gx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), fn)


# ---------------------------------------------------------------------------
# segmented softmax and cross-entropy


def _segments(cols: int, boundaries: Sequence[int]) -> list[tuple[int, int]]:
    edges = [0, *boundaries, cols]
    for lo, hi in zip(edges, edges[1:]):
        if hi <= lo:
            raise ValueError(f"softmax_segments: empty segment [{lo}, {hi}) with {cols} columns")
        if lo < 0 or hi > cols:
            raise ValueError(f"softmax_segments: split point outside [0, {cols})")
    return list(zip(edges, edges[1:]))


def softmax_segments(logits: Tensor, boundaries: Sequence[int],
                     mask: np.ndarray | None = None) -> Tensor:
    """Independent max-subtracted softmax within each column segment of the last axis.

    ``boundaries`` are interior split points partitioning the columns; segments
    never exchange probability mass.  ``mask`` (boolean, broadcastable to the
    logits) marks attendable entries; masked entries get weight 0 and each row
    of each segment must keep at least one attendable entry.
    """
    logits = as_tensor(logits)
    segs = _segments(logits.shape[-1], boundaries)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    out_data = np.empty_like(logits.data)
    for lo, hi in segs:
        z = logits.data[..., lo:hi]
        if mask is None:
            m = z.max(axis=-1, keepdims=True)
            e = np.exp(z - m)
        else:
            mseg = mask[..., lo:hi]
            if not mseg.any(axis=-1).all():
                raise ValueError("softmax_segments: a row has no attendable entry in a segment")
            m = np.where(mseg, z, -np.inf).max(axis=-1, keepdims=True)
            e = np.where(mseg, np.exp(z - m), 0.0)
        out_data[..., lo:hi] = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)

    def fn(g):
        gx = np.empty_like(g)
        for lo, hi in segs:
            s = out_data[..., lo:hi]
            gs = g[..., lo:hi]
            gx[..., lo:hi] = s * (gs - (gs * s).sum(axis=-1, keepdims=True))
        return (gx,)

    return _record(out, (logits,), fn)


def cross_entropy_from_logits(logits: Tensor, targets: np.ndarray,
                              mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over masked positions."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: mask selects no positions")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)
    nll = (lse - picked)[..., 0]
    out = Tensor((nll * mask).sum() / count)

    def fn(g):
        p = np.exp(z - lse)
        p_target = np.take_along_axis(p, targets[..., None], axis=-1)
        grad = p.copy()
        np.put_along_axis(grad, targets[..., None], p_target - 1.0, axis=-1)
        grad *= (mask[..., None] * (float(np.asarray(g).reshape(())) / count))
        return (grad,)

    return _record(out, (logits,), fn)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor],
                      h: float = 1e-5) -> float:
    """Max relative error between analytic gradients of ``f`` and central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    tensor built from the current parameter values.  Parameter grad buffers
    are zeroed and overwritten.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("finite_diff_check: all params must be trainable")
        p.zero_grad()

    tape = GradientTape()
    with tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("finite_diff_check: loss is non-finite at the base point")
    backward(loss, tape)
    analytic = [p.grad.copy() for p in params]

    def eval_loss() -> float:
        val = f()
        v = float(val.data.reshape(()))
        if not np.isfinite(v):
            raise EvaluationError("finite_diff_check: loss became non-finite during probing")
        return v

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_loss()
            flat[i] = orig - h
            fm = eval_loss()
            flat[i] = orig
            central = (fp - fm) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(central), 1e-8)
            worst = max(worst, abs(aflat[i] - central) / denom)
    return worst
