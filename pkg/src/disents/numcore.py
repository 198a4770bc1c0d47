"""Float64 tensors with taped reverse-mode differentiation.

Every differentiable operation used by the forecasting model lives here:
elementwise arithmetic, 2-d matmul, shape ops, reductions, softmax, layer
norm, dropout, plus the SVD pseudo-inverse (a deliberate gradient barrier)
and the Adam update. Ops executed inside a `recording()` block append one
entry to the active DiffRecord; `backward(loss)` replays that tape exactly
once, in reverse execution order, and leaves gradients on every
participating tensor that requires them.

All data is float64 and row-major. The tape is thread-local, so concurrent
evaluation threads that never open a recording stay independent.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array plus a gradient slot of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._record: DiffRecord | None = None

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
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic operators delegate to the module-level ops so that every
    # code path goes through the tape.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _TapeEntry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class DiffRecord:
    """Execution tape: ops appended in order, adjoints replayed in reverse."""

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __len__(self) -> int:
        return len(self._entries)


_LOCAL = threading.local()


def _active_record() -> DiffRecord | None:
    return getattr(_LOCAL, "record", None)


@contextmanager
def recording(record: DiffRecord | None = None):
    """Make `record` (or a fresh one) the active tape for this thread."""
    rec = DiffRecord() if record is None else record
    prev = _active_record()
    _LOCAL.record = rec
    try:
        yield rec
    finally:
        _LOCAL.record = prev


@contextmanager
def no_recording():
    """Suspend taping, e.g. for finite-difference probes inside a recording."""
    prev = _active_record()
    _LOCAL.record = None
    try:
        yield
    finally:
        _LOCAL.record = prev


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def detach(t: Tensor) -> Tensor:
    """Copy of `t` with no gradient linkage."""
    return Tensor(np.array(t.data), requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record_op(out_data: Array, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    rec = _active_record()
    tracked = rec is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        out._record = rec
        rec._entries.append(_TapeEntry(out, inputs, backward))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _elementwise(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"operands are not broadcastable: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return (
            _unbroadcast(bwd_a(g, a.data, b.data), a.data.shape),
            _unbroadcast(bwd_b(g, a.data, b.data), b.data.shape),
        )

    return _record_op(out, (a, b), backward)


def add(a, b) -> Tensor:
    return _elementwise(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def subtract(a, b) -> Tensor:
    return _elementwise(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def multiply(a, b) -> Tensor:
    return _elementwise(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def divide(a, b) -> Tensor:
    return _elementwise(
        a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def negate(t) -> Tensor:
    t = _lift(t)
    return _record_op(-t.data, (t,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects two matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record_op(out, (a, b), backward)


def transpose(t) -> Tensor:
    t = _lift(t)
    if t.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {t.shape}")
    return _record_op(t.data.T, (t,), lambda g: (g.T,))


def reshape(t, shape) -> Tensor:
    t = _lift(t)
    try:
        out = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}") from exc
    orig = t.data.shape
    return _record_op(out, (t,), lambda g: (g.reshape(orig),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes incompatible: {[t.shape for t in ts]}") from exc
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record_op(out, tuple(ts), backward)


def slice_axis(t, axis: int, start: int, stop: int) -> Tensor:
    t = _lift(t)
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"slice axis {axis} out of range for shape {t.shape}")
    axis %= t.ndim
    index = tuple(slice(start, stop) if i == axis else slice(None) for i in range(t.ndim))
    out = t.data[index]

    def backward(g):
        full = np.zeros_like(t.data)
        full[index] = g
        return (full,)

    return _record_op(out, (t,), backward)


def gather_rows(t, indices) -> Tensor:
    """Select rows of a matrix; duplicate indices accumulate in the adjoint."""
    t = _lift(t)
    if t.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {t.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows expects a flat index list, got shape {idx.shape}")
    out = t.data[idx]

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record_op(out, (t,), backward)


def _unary(t, out_data, bwd) -> Tensor:
    return _record_op(out_data, (t,), bwd)


def exp(t) -> Tensor:
    t = _lift(t)
    out = np.exp(t.data)
    return _unary(t, out, lambda g: (g * out,))


def log(t) -> Tensor:
    t = _lift(t)
    return _unary(t, np.log(t.data), lambda g: (g / t.data,))


def sqrt(t) -> Tensor:
    t = _lift(t)
    out = np.sqrt(t.data)
    return _unary(t, out, lambda g: (g * 0.5 / out,))


def relu(t) -> Tensor:
    t = _lift(t)
    mask = t.data > 0
    return _unary(t, np.where(mask, t.data, 0.0), lambda g: (g * mask,))


def gelu(t) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    t = _lift(t)
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _unary(t, out, backward)


def _reduce_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axis}")
    return axes


def _expand_reduced(g: Array, axes: tuple[int, ...], keepdims: bool) -> Array:
    if keepdims:
        return g
    g = np.asarray(g)
    for a in sorted(axes):
        g = np.expand_dims(g, a)
    return g


def sum(t, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    t = _lift(t)
    axes = _reduce_axes(axis, t.ndim)
    out = t.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        g = _expand_reduced(g, axes, keepdims)
        return (np.broadcast_to(g, t.data.shape),)

    return _record_op(out, (t,), backward)


def mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _lift(t)
    axes = _reduce_axes(axis, t.ndim)
    count = 1
    for a in axes:
        count *= t.data.shape[a]
    if count == 0:
        raise ShapeError(f"mean over empty axes of shape {t.shape}")
    out = t.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        g = _expand_reduced(g, axes, keepdims)
        return (np.broadcast_to(g / count, t.data.shape),)

    return _record_op(out, (t,), backward)


def variance(t, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the element count, not count - 1)."""
    t = _lift(t)
    axes = _reduce_axes(axis, t.ndim)
    count = 1
    for a in axes:
        count *= t.data.shape[a]
    if count == 0:
        raise ShapeError(f"variance over empty axes of shape {t.shape}")
    centered = t.data - t.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)

    def backward(g):
        g = _expand_reduced(g, axes, keepdims)
        return (np.broadcast_to(g, t.data.shape) * (2.0 / count) * centered,)

    return _record_op(out, (t,), backward)


def softmax(t) -> Tensor:
    """Softmax over the last dimension, stabilised by max subtraction."""
    t = _lift(t)
    if t.ndim < 1 or t.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dimension, got shape {t.shape}")
    if not np.isfinite(t.data).all():
        raise NumericError("softmax input contains non-finite entries")
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _unary(t, out, backward)


def layer_norm(t, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last dimension to zero mean and unit variance, then affine."""
    t, gain, bias = _lift(t), _lift(gain), _lift(bias)
    n = t.shape[-1] if t.ndim else 0
    if n < 2:
        raise ShapeError(f"layer_norm over a degenerate last dimension, shape {t.shape}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}")
    mu = t.data.mean(axis=-1, keepdims=True)
    centered = t.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        d_gain = (g * xhat).sum(axis=lead)
        d_bias = g.sum(axis=lead)
        d_xhat = g * gain.data
        d_x = inv * (
            d_xhat
            - d_xhat.mean(axis=-1, keepdims=True)
            - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        return d_x, d_gain, d_bias

    return _record_op(out, (t, gain, bias), backward)


def dropout(t, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity (same tensor) when not training or rate 0."""
    t = _lift(t)
    if not training or rate == 0.0:
        return t
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ContractError("dropout in training mode needs the run RNG")
    mask = (rng.random(t.data.shape) >= rate) / (1.0 - rate)
    return _unary(t, t.data * mask, lambda g: (g * mask,))


def backward(loss: Tensor) -> None:
    """Replay the loss's tape once, reversed, accumulating adjoints.

    Afterwards every requires_grad tensor that participated in the tape has
    `.grad` set; tensors the loss does not reach get an all-zero gradient.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward needs a scalar loss tensor")
    rec = loss._record
    if rec is None:
        raise ContractError("loss does not participate in any DiffRecord")
    acc: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(rec._entries):
        g_out = acc.get(id(entry.out))
        if g_out is None:
            continue
        for t, g in zip(entry.inputs, entry.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            prev = acc.get(id(t))
            acc[id(t)] = np.asarray(g, dtype=np.float64) if prev is None else prev + g
    seen: set[int] = set()
    for entry in rec._entries:
        for t in (entry.out, *entry.inputs):
            key = id(t)
            if key in seen or not t.requires_grad:
                continue
            seen.add(key)
            g = acc.get(key)
            t.grad = np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.data.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between taped and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    `f` must be a deterministic scalar-valued function of its argument.
    """
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with recording():
        out = f(probe)
        backward(out)
    if probe.grad is None:
        raise ContractError("f does not use its argument")
    analytic = probe.grad.reshape(-1).copy()
    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    with no_recording():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            hi = f(Tensor(bumped.reshape(base.shape))).item()
            bumped[i] = flat[i] - h
            lo = f(Tensor(bumped.reshape(base.shape))).item()
            numeric[i] = (hi - lo) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def pinv(x, rcond: float = 1e-6) -> Tensor:
    """Moore-Penrose pseudo-inverse via SVD, singular values below
    rcond * sigma_max treated as zero.

    Deliberately a gradient barrier: the result is a constant with respect
    to differentiation and never joins the tape.
    """
    t = _lift(x)
    if t.ndim != 2:
        raise ShapeError(f"pinv expects a matrix, got shape {t.shape}")
    if not np.isfinite(t.data).all():
        raise NumericError("pinv input contains non-finite entries")
    u, s, vt = np.linalg.svd(t.data, full_matrices=False)
    if s.size:
        keep = s > rcond * s[0]
        inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        out = (vt.T * inv) @ u.T
    else:
        out = np.zeros((t.shape[1], t.shape[0]))
    return Tensor(out)


@dataclass
class AdamState:
    """First/second moment buffers for one fixed, ordered parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[Array | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter data."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ContractError(
            f"adam_step got {len(params)} params, {len(grads)} grads, state of {len(state.m)}"
        )
    state.step_count += 1
    correct1 = 1.0 - state.beta1 ** state.step_count
    correct2 = 1.0 - state.beta2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise ContractError("adam_step received a missing gradient")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(
                f"adam_step shape mismatch: param {p.data.shape}, grad {g.shape}, moment {m.shape}"
            )
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
