"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op builds its output through :func:`_record`, which
appends a record (output, parents, backward rule) to the active :class:`Tape`
when any parent requires a gradient. ``Tape.backward`` replays those records
in exact reverse order.

Usage::

    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError

DTYPE = np.float64

_state = threading.local()


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __array_priority__ = 100

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self, grad=None):
        current_tape().backward(self, grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    A tape becomes the active recorder inside a ``with`` block. Outside any
    block, a per-thread default tape is used.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, out, parents, backward):
        self.records.append(_Record(out, parents, backward))

    def clear(self):
        self.records.clear()

    def replay_order(self):
        """Records in the order backward visits them."""
        return list(reversed(self.records))

    def backward(self, root: Tensor, grad=None, retain=False):
        if not root.requires_grad:
            raise NumericsError("backward() called on a tensor that does not require grad")
        if grad is None:
            if root.data.size != 1:
                raise ShapeError(f"backward() needs an explicit grad for non-scalar shape {root.shape}")
            grad = np.ones_like(root.data)
        grads = {id(root): np.asarray(grad, dtype=DTYPE)}
        produced = set()
        seen = {}
        for rec in reversed(self.records):
            produced.add(id(rec.out))
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            rec.out.grad = g
            parent_grads = rec.backward(g)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                seen[key] = p
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # whatever is left was not produced on this tape: leaves
        for key, g in grads.items():
            if key in produced:
                continue
            leaf = seen.get(key, root)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if not retain:
            self.clear()


def _stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = [Tape()]
    return stack


def current_tape() -> Tape:
    return _stack()[-1]


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _record(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(out, tuple(parents), backward)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericsError("division by zero")

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(a.data / b.data, (a, b), backward)


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    return _record(x.data * s, (x,), lambda g: (g * s,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    u = x.data
    inner = _GELU_C * (u + 0.044715 * u ** 3)
    th = np.tanh(inner)
    out = 0.5 * u * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        return (g * (0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * dinner),)

    return _record(out, (x,), backward)


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return {"gelu": gelu, "relu": relu}[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected 'gelu' or 'relu'") from None


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericsError("sqrt of negative value")
    out = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _record(out, (x,), backward)


def norm_lastdim(x) -> Tensor:
    """Euclidean norm over the last axis; the gradient at 0 is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n[..., None] > 0, x.data / n[..., None], 0.0)
        return (g[..., None] * unit,)

    return _record(n, (x,), backward)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return scale(sum_(x, axes, keepdims), 1.0 / count)


# --------------------------------------------------------------------- shapes


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, key, g)
        return (buf,)

    return _record(np.array(out, copy=True), (x,), backward)


def take(x, indices, axis: int) -> Tensor:
    """Gather along ``axis``; ``indices`` may be multi-dimensional."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        buf = np.zeros_like(np.moveaxis(x.data, axis, 0))
        # g: x.shape[:axis] + idx.shape + x.shape[axis+1:]
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(buf, idx, gm)
        return (np.moveaxis(buf, 0, axis),)

    return _record(out, (x,), backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, backward)


def concat_lastdim(tensors) -> Tensor:
    return concat(tensors, axis=-1)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _record(out, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` has shape (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _record(out.reshape(lead + (w.shape[1],)), parents, backward)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericsError("softmax input contains non-finite values")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record(y, (x,), backward)


def layer_norm(x, gamma=None, beta=None, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine parameters."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        beta = as_tensor(beta)
        out = xhat * gamma.data + beta.data
        parents += [gamma, beta]
    n = x.shape[-1]

    def backward(g):
        gh = g if gamma is None else g * gamma.data
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * np.sum(gh * xhat, axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            lead = tuple(range(g.ndim - 1))
            grads += [np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)]
        return grads

    return _record(out, parents, backward)


# ----------------------------------------------------------- temporal operators


def temporal_conv(x, w, b=None, stride: int = 1) -> Tensor:
    """Zero-padded convolution along the time axis of a (B, T, J, C) tensor.

    ``w`` has shape (kernel, C_in, C_out). The kernel must be odd; padding of
    (kernel - 1) / 2 keeps the output length at ``ceil(T / stride)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4:
        raise ShapeError(f"temporal_conv expects (B, T, J, C), got {x.shape}")
    if w.ndim != 3 or w.shape[1] != x.shape[3]:
        raise ShapeError(f"temporal_conv: weight {w.shape} incompatible with input {x.shape}")
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"temporal_conv needs an odd kernel, got {k}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    B, T, J, _ = x.shape
    if T < 1:
        raise ShapeError("temporal_conv needs T >= 1")
    pad = (k - 1) // 2
    t_out = -(-T // stride)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0), (0, 0)))
    span = stride * (t_out - 1) + 1
    taps = [xp[:, i:i + span:stride] for i in range(k)]
    out = sum(taps[i] @ w.data[i] for i in range(k))
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i:i + span:stride] += g @ w.data[i].T
            gx = gxp[:, pad:pad + T]
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gw = np.stack([taps[i].reshape(-1, taps[i].shape[-1]).T @ g2 for i in range(k)])
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return _record(out, parents, backward)


def interpolation_matrix(t_in: int, t_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (t_out, t_in)."""
    m = np.zeros((t_out, t_in))
    if t_in == 1 or t_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(t_out) * (t_in - 1) / (t_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), t_in - 1)
    hi = np.minimum(lo + 1, t_in - 1)
    frac = pos - lo
    rows = np.arange(t_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def temporal_upsample_bilinear(x, target_T: int) -> Tensor:
    """Linear interpolation along time (align-corners) to ``target_T`` frames."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"temporal_upsample expects (B, T, J, C), got {x.shape}")
    if target_T < 1:
        raise ShapeError(f"target_T must be >= 1, got {target_T}")
    T = x.shape[1]
    if target_T < T:
        raise ShapeError(f"temporal_upsample cannot shrink {T} frames to {target_T}")
    if target_T == T:
        return x
    m = interpolation_matrix(T, target_T)
    out = np.einsum("st,btjc->bsjc", m, x.data, optimize=True)
    return _record(out, (x,), lambda g: (np.einsum("st,bsjc->btjc", m, g, optimize=True),))


# ------------------------------------------------------------ gradient checking


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``target``."""
    flat = target.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(target.shape)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest element-wise relative error between tape and numerical gradients.

    The error is ``|analytic - numeric| / max(1, |analytic|)``. ``fn`` must
    close over ``inputs`` and return a scalar tensor.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        numeric = numerical_grad(fn, t, eps)
        rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst
