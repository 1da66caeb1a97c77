"""Reverse-mode automatic differentiation over dense float64 arrays.

A small dynamic-graph engine: every operation records its parents and a
vector-Jacobian product closure, and ``backward()`` walks the recorded
graph exactly once in reverse topological order, accumulating gradients
into the requires-grad leaves. Arrays are float64 throughout and every
op output (and every produced gradient) is checked for NaN/Inf; a
non-finite value raises :class:`NumericsError` instead of propagating.

The graph is rebuilt on every forward pass, so re-running part of a
model (e.g. encoder-only inner loops) just records a fresh graph.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class NumericsError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Invalid use of the backward graph (non-scalar loss, repeated backward)."""


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


_GRAD_ENABLED = True

# Module switch for the finite guard. On by default: the Tensor invariant is
# that values and gradients are finite after every op.
GUARD_FINITE = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, what: str) -> None:
    # single reduction pass: any NaN/Inf in arr makes the sum non-finite
    if GUARD_FINITE and not np.isfinite(arr.sum()):
        if np.all(np.isfinite(arr)):  # astronomically large but finite values summed to inf
            return
        raise NumericsError(f"non-finite {what} (NaN/Inf)")


def _quiet():
    # Non-finite results raise NumericsError, so numpy's own warnings are noise.
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


class Tensor:
    """Dense float64 array participating in a reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor value")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._consumed = False

    # -- introspection --------------------------------------------------

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- backward -------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires-grad leaf.

        Requires a scalar on a live graph; calling it twice on the same
        loss is rejected (rebuild the graph instead).
        """
        if self.data.shape != ():
            raise GraphError("backward requires a scalar loss")
        if not self.requires_grad:
            raise GraphError("loss does not require grad (no recorded graph)")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild it first")

        # Iterative post-order DFS: reverse gives a valid topological order,
        # so each node is processed exactly once with its full gradient.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, "gradient")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._consumed = True

    # -- operator sugar ---------------------------------------------------

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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def _promote(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    _check_finite(data, "op result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    data = a.data + b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _sum_to_shape(g, a.data.shape) if na else None,
            _sum_to_shape(g, b.data.shape) if nb else None,
        )

    return _make(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    data = a.data - b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _sum_to_shape(g, a.data.shape) if na else None,
            _sum_to_shape(-g, b.data.shape) if nb else None,
        )

    return _make(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    with _quiet():
        data = a.data * b.data
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _sum_to_shape(g * bd, ad.shape) if na else None,
            _sum_to_shape(g * ad, bd.shape) if nb else None,
        )

    return _make(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    with _quiet():
        data = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _sum_to_shape(g / bd, ad.shape)
        gb = _sum_to_shape(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _make(data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _promote(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _promote(a)
    with _quiet():
        out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a) -> Tensor:
    a = _promote(a)
    with _quiet():
        out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = _promote(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _promote(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def relu(a) -> Tensor:
    a = _promote(a)
    out = np.maximum(a.data, 0.0)
    pos = a.data > 0

    def vjp(g):
        return (g * pos,)

    return _make(out, (a,), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximation GELU."""
    a = _promote(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    half_1pt = 0.5 * (1.0 + t)
    out = x * half_1pt

    def vjp(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (half_1pt + x * (0.5 - 0.5 * (t * t)) * dinner),)

    return _make(out, (a,), vjp)


def pow_(a, p: float) -> Tensor:
    a = _promote(a)
    ad = a.data
    with _quiet():
        out = ad**p

    def vjp(g):
        return (g * p * ad ** (p - 1),)

    return _make(out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero outside the interval."""
    a = _promote(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = ((ad >= lo) & (ad <= hi)).astype(np.float64)

    def vjp(g):
        return (g * inside,)

    return _make(out, (a,), vjp)


# -- structural ops -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _sum_to_shape(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape) if na else None
        gb = _sum_to_shape(np.matmul(ad.swapaxes(-1, -2), g), bd.shape) if nb else None
        return ga, gb

    return _make(data, (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    a = _promote(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(data, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _promote(a)
    old = a.data.shape
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _make(data, (a,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_promote(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of no tensors")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, ts, vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis` starting at `start`."""
    a = _promote(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis {axis} of {a.shape}")
    idx = tuple(slice(None) if i != axis % a.ndim else slice(start, start + length) for i in range(a.ndim))
    data = a.data[idx].copy()
    full_shape = a.data.shape

    def vjp(g):
        buf = np.zeros(full_shape, dtype=np.float64)
        buf[idx] = g
        return (buf,)

    return _make(data, (a,), vjp)


def gather_rows(table, ids) -> Tensor:
    """Row lookup `table[ids]` with scatter-add backward (ties accumulate)."""
    table = _promote(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d table, got {table.shape}")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("gather_rows ids must be integers")
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"gather_rows id outside [0, {n_rows})")
    data = table.data[ids]
    tshape = table.data.shape

    def vjp(g):
        buf = np.zeros(tshape, dtype=np.float64)
        np.add.at(buf, ids, g)
        return (buf,)

    return _make(data, (table,), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _promote(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy() if not keepdims else np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _make(data, (a,), vjp)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _promote(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else np.prod([shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, shape).copy(),)

    return _make(data, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along `axis`."""
    a = _promote(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    eps is tiny because values are float64 and the normalized-variance
    invariant is checked to 1e-8.
    """
    x, gain, bias = _promote(x), _promote(gain), _promote(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = xd.shape[-1]
    gd = gain.data

    def vjp(g):
        dxhat = g * gd
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = -(dxhat.sum(axis=-1, keepdims=True)) * inv + dvar * (-2.0) * xc.mean(axis=-1, keepdims=True)
        dx = dxhat * inv + dvar * 2.0 * xc / d + dmu / d
        red = tuple(range(xd.ndim - 1))
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), vjp)


def cross_entropy_logits(logits, targets, mask=None) -> Tensor:
    """Mean negative log-softmax probability of `targets` over unmasked rows.

    logits: [N, V]; targets: int ids [N]; mask: float/bool [N] (1 = counts).
    """
    logits = _promote(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects [N, V] logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets)
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} does not match logits rows {n}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ShapeError("targets must be integer token ids")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id outside vocabulary [0, {v})")
    m = np.ones(n, dtype=np.float64) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != (n,):
        raise ShapeError(f"mask shape {m.shape} does not match logits rows {n}")
    msum = m.sum()
    if msum <= 0:
        raise ShapeError("loss mask selects no positions")

    ld = logits.data
    mx = ld.max(axis=1, keepdims=True)
    z = ld - mx
    lse = np.log(np.exp(z).sum(axis=1)) + mx[:, 0]
    nll = lse - ld[np.arange(n), t]
    loss = np.float64((nll * m).sum() / msum)

    def vjp(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        return (p * (m / msum)[:, None] * g,)

    return _make(np.asarray(loss), (logits,), vjp)


def clip_gradients(tensors, max_norm: float) -> float:
    """Scale accumulated gradients so their global norm is at most max_norm.

    Returns the pre-clip global norm.
    """
    tensors = list(tensors)
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def reparameterize(mean: Tensor, logvar: Tensor, noise) -> Tensor:
    """mu + exp(logvar / 2) * noise; gradients flow to mu/logvar, not noise."""
    mean, logvar = _promote(mean), _promote(logvar)
    eps = np.asarray(noise, dtype=np.float64)
    if eps.shape != mean.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match mean shape {mean.shape}")
    return add(mean, mul(exp(mul(logvar, 0.5)), Tensor(eps)))
