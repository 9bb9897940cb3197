"""Minimal reverse-mode autodiff on float32 numpy arrays.

Forward calls record a define-by-run graph: each result keeps its parent
tensors plus a closure that maps the incoming gradient to per-parent
gradients. backward() runs the closures in reverse topological order.
Gradients accumulate across repeated backward calls until reset.

Single-threaded by design; nothing here is safe to share across threads.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ParameterError, ShapeError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float32 array with an optional autodiff tape entry.

    data: float32 ndarray. grad: float32 ndarray or None, same shape.
    Tensors created inside no_grad(), or from parents that do not require
    grad, are constants: they carry no parents and no backward closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _record(out: Tensor, parents, backward_fn) -> Tensor:
    """Attach graph metadata to out if recording is on and any parent needs grad."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Reverse pass from a scalar loss. Accumulates into .grad of every
    tensor on the tape that requires grad; repeated calls keep adding."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward() on a tensor with no graph attached")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # per-pass accumulator so repeated backward() calls do not re-propagate
    # gradients stored from earlier passes
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in pending:
                pending[pid] = pending[pid] + pg
            else:
                pending[pid] = pg


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape),
        _unbroadcast(g, b.data.shape),
    ))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    ))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * np.float32(s))
    return _record(out, (a,), lambda g: (g * np.float32(s),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (..., m, k) @ b (..., k, n) -> (..., m, n); both operands >= 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), back)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), computed stably for large |x|."""
    sig = _sigmoid(x.data)
    out = Tensor(x.data * sig)

    def back(g):
        # d/dx = sig * (1 + x * (1 - sig))
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _record(out, (x,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-5) -> Tensor:
    """x (..., d) scaled to unit RMS over the last axis, then gamma (d,)."""
    if gamma.ndim != 1 or gamma.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm gamma {gamma.shape} does not match x {x.shape}")
    n = x.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + np.float32(eps))
    out = Tensor(x.data * r * gamma.data)

    def back(g):
        gg = g * gamma.data
        inner = np.sum(gg * x.data, axis=-1, keepdims=True)
        gx = r * gg - (r ** 3 / np.float32(n)) * x.data * inner
        ggamma = np.sum(g * x.data * r, axis=tuple(range(g.ndim - 1)))
        return gx.astype(np.float32), ggamma.astype(np.float32)

    return _record(out, (x, gamma), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (used for attention weights)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def back(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), back)


def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """log softmax(x / temperature) over the last axis. temperature > 0."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    t = np.float32(temperature)
    z = x.data / t
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - lse
    out = Tensor(logp)

    # capture the array, not `out`: a closure referencing the tensor it is
    # attached to forms a reference cycle that keeps whole step graphs
    # alive until a full gc pass
    def back(g):
        p = np.exp(logp)
        gz = g - p * g.sum(axis=-1, keepdims=True)
        return (gz / t,)

    return _record(out, (x,), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """table (V, d) indexed by integer ids (...) -> (..., d)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = Tensor(table.data[ids])

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _record(out, (table,), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, a, b))
    return _record(out, (x,), lambda g: (np.swapaxes(g, a, b),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice length elements from start along axis."""
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of bounds for axis {axis} "
            f"of shape {x.shape}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(out, (x,), back)


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """x (..., V) gathered at ids (...) along the last axis -> (...)."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"gather ids {ids.shape} do not match x {x.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[-1]):
        raise ShapeError(
            f"gather ids out of range [0, {x.shape[-1]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    expanded = np.expand_dims(ids, -1)
    out = Tensor(np.take_along_axis(x.data, expanded, axis=-1)[..., 0])

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, expanded, np.expand_dims(g, -1), axis=-1)
        return (gx,)

    return _record(out, (x,), back)


def tsum(x: Tensor) -> Tensor:
    """Sum every element to a scalar tensor."""
    out = Tensor(np.float32(x.data.sum(dtype=np.float64)))
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction. Moments are allocated lazily on the first
    step; step() consumes and clears each parameter's gradient."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        if not self.params:
            raise ParameterError("optimizer needs at least one parameter")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step_count = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError(f"parameter {i} has no gradient; run backward first")
        self.step_count += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        c1 = np.float32(1.0 - self.beta1 ** self.step_count)
        c2 = np.float32(1.0 - self.beta2 ** self.step_count)
        lr = np.float32(self.lr)
        eps = np.float32(self.eps)
        for i, p in enumerate(self.params):
            g = p.grad
            m = self._m.get(i)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                self._m[i], self._v[i] = m, v
            else:
                v = self._v[i]
            m *= b1
            m += (np.float32(1.0) - b1) * g
            v *= b2
            v += (np.float32(1.0) - b2) * np.square(g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    if not max_norm > 0:
        raise ParameterError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = np.float32(max_norm / norm)
        for g in grads:
            g *= factor
    return norm
