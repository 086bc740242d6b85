"""Dense tensors with reverse-mode automatic differentiation.

Values are held as float64 numpy arrays so that gradients survive
finite-difference scrutiny; single precision is the external
interchange format (see checkpoint module). Every differentiable
operation appends one entry to a thread-confined gradient tape; the
tape is built during a forward pass and consumed by exactly one
backward() call.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "add",
    "backward",
    "broadcast_to",
    "concat",
    "constant",
    "cross_entropy",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reset_tape",
    "reshape",
    "slice_axis",
    "softmax",
    "sub",
    "tensor_sum",
    "transpose",
    "truncated_normal",
    "zeros",
]


class Tensor:
    """A dense n-dimensional value with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def truncated_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal(0, std) samples clipped by resampling outside 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# --- gradient tape -----------------------------------------------------

@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple
    grad_fn: "callable"


@dataclass
class ComputationTape:
    """Operations recorded in forward (topological) order."""

    entries: list = field(default_factory=list)


class _TapeState(threading.local):
    def __init__(self):
        self.tape = ComputationTape()
        self.enabled = True


_state = _TapeState()


def grad_enabled() -> bool:
    return _state.enabled


def reset_tape():
    """Drop any recorded-but-unconsumed operations (worker handoff, tests)."""
    _state.tape = ComputationTape()


@contextmanager
def no_grad():
    """Disable tape recording within the block (evaluation paths)."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _record(output: Tensor, inputs, grad_fn):
    if _state.enabled and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _state.tape.entries.append(TapeEntry(output, tuple(inputs), grad_fn))


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from loss.

    Consumes the current tape: each recorded operation is visited exactly
    once, in reverse order, and the tape is reset afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not tape.entries:
        raise ContractError("backward() on an empty tape; no gradients were recorded")
    _state.tape = ComputationTape()
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        for t, gt in zip(entry.inputs, entry.grad_fn(g)):
            if gt is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gt, dtype=np.float64, copy=True)
            else:
                t.grad = t.grad + gt


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- operations --------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions are stacked matrix batches."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: needs at least 1-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    try:
        out = Tensor(a.data @ b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.tensordot(g, b.data, axes=0)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.tensordot(a.data, g, axes=0)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    _record(out, (a, b), grad_fn)
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    _record(out, (a,), lambda g: (np.transpose(g, inv),))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}")
    _record(out, (a,), lambda g: (g.reshape(a.shape),))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        out = Tensor(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}")
    _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    _record(out, tuple(tensors), grad_fn)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    _record(out, (a,), grad_fn)
    return out


def softmax(a: Tensor, axis=-1) -> Tensor:
    """Row-stochastic softmax, stabilized by max subtraction."""
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax: input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def grad_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    _record(out, (a,), grad_fn)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    _record(out, (a,), grad_fn)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps=1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim of {a.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def grad_fn(g):
        gx = g * gain.data
        dxhat_mean = gx.mean(axis=-1, keepdims=True)
        proj = (gx * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (gx - dxhat_mean - xhat * proj)
        axes = tuple(range(g.ndim - 1))
        return ga, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    _record(out, (a, gain, bias), grad_fn)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy for integer labels.

    logits: (batch, classes). -inf logits are permitted (masked classes
    carry exactly zero probability and zero gradient); NaN/+inf are not.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}"
        )
    x = logits.data
    if np.any(np.isnan(x)) or np.any(np.isposinf(x)):
        raise NumericError("cross_entropy: logits contain NaN or +inf")
    n = x.shape[0]
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    logp = (x - m) - np.log(z)
    picked = logp[np.arange(n), labels]
    if np.any(np.isneginf(picked)):
        raise NumericError("cross_entropy: a label sits on a -inf (masked) logit")
    out = Tensor(-picked.mean())

    def grad_fn(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    _record(out, (logits,), grad_fn)
    return out


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    _record(out, (a,), grad_fn)
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape) / count,)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    _record(out, (a,), grad_fn)
    return out
