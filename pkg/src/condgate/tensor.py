"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable value in this package is a :class:`Tensor`: a numpy
float64 array plus an accumulated gradient of the same shape.  Applying an
operation records the inputs and a backward closure on the output, so the
resulting graph doubles as the computation record; ``backward()`` replays it
in reverse topological order.

Gradient semantics:

* gradients accumulate with ``+=``; leaves keep their accumulation across
  repeated ``backward()`` calls until ``zero_grad`` (so two backward passes
  double every leaf gradient),
* intermediate (non-leaf) gradients are reset at the start of each backward
  pass and hold that pass's gradient afterwards,
* operations on tensors that do not require gradients produce constants and
  record nothing (see :func:`no_grad`).

Broadcasting is limited to what the layers in this package need: scalar-with-
anything for ``+``/``*``, and row-vector bias addition ``[T,C] + [C]``.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "matmul",
    "logaddexp",
    "concat",
    "take_rows",
    "scatter_rows",
    "narrow",
    "dropout",
    "ste_threshold",
    "sgd_step",
    "zero_grad",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that makes all operations produce constants."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_f64(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    return np.ascontiguousarray(a)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(values)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.name = name
        self._grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; all zeros until a backward pass reaches it."""
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self._grad = None

    # -- autodiff -----------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = g.copy()
        else:
            self._grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, False))
        # Non-leaf gradients belong to a single pass; leaves accumulate.
        for node in topo:
            if node._parents:
                node._grad = None
        self._grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node._grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, other, negate_b=True)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return mul(tsum(self, axis), 1.0 / n)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def leaky_relu(self, alpha: float):
        return leaky_relu(self, alpha)

    def log(self):
        return tlog(self)

    def exp(self):
        return texp(self)

    def square(self):
        return square(self)

    def log_softmax(self):
        return log_softmax(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- arithmetic ---------------------------------------------------------------


def add(a, b, negate_b: bool = False) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb and sa != () and sb != ():
        # Only row-vector bias broadcasting is supported beyond scalars.
        if not (len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]):
            raise ShapeError(f"add: incompatible shapes {sa} and {sb}")
    data = a.data - b.data if negate_b else a.data + b.data
    sign = -1.0 if negate_b else 1.0

    def bw(g):
        if a.requires_grad:
            a._accumulate(g if sa == data.shape else _reduce_to(g, sa))
        if b.requires_grad:
            gb = g if sb == data.shape else _reduce_to(g, sb)
            b._accumulate(gb if sign > 0 else -gb)

    return _result(data, (a, b), bw)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)  # [T,C] -> [C]


def neg(a: Tensor) -> Tensor:
    a = _lift(a)

    def bw(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"mul: incompatible shapes {sa} and {sb}")
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            ga = g * b.data
            a._accumulate(ga if sa == data.shape else np.asarray(ga.sum()))
        if b.requires_grad:
            gb = g * a.data
            b._accumulate(gb if sb == data.shape else np.asarray(gb.sum()))

    return _result(data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1:
                b._accumulate(np.outer(a.data, g))
            else:
                b._accumulate(a.data.T @ g)

    return _result(data, (a, b), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    a = _lift(a)
    data = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        elif axis == 0:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _result(data, (a,), bw)


# -- pointwise nonlinearities -------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _lift(a)
    data = _sigmoid_np(a.data)

    def bw(g):
        a._accumulate(g * data * (1.0 - data))

    return _result(data, (a,), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = _lift(a)
    data = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - data * data))

    return _result(data, (a,), bw)


def leaky_relu(a, alpha: float) -> Tensor:
    a = _lift(a)
    scale = np.where(a.data >= 0, 1.0, alpha)
    data = a.data * scale

    def bw(g):
        a._accumulate(g * scale)

    return _result(data, (a,), bw)


def tlog(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input has non-positive entries")
    data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _result(data, (a,), bw)


def texp(a) -> Tensor:
    a = _lift(a)
    data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * data)

    return _result(data, (a,), bw)


def square(a) -> Tensor:
    a = _lift(a)

    def bw(g):
        a._accumulate(g * (2.0 * a.data))

    return _result(a.data * a.data, (a,), bw)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis, stabilised by max subtraction."""
    a = _lift(a)
    x = a.data
    if x.ndim not in (1, 2) or x.shape[-1] < 1:
        raise ShapeError(f"log_softmax: expected 1-D or 2-D input, got {x.shape}")
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def bw(g):
        a._accumulate(g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return _result(data, (a,), bw)


def logaddexp(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"logaddexp: incompatible shapes {a.data.shape} and {b.data.shape}")
    data = np.logaddexp(a.data, b.data)

    def bw(g):
        # Where both inputs are -inf the output is -inf and the gradient is 0.
        both_inf = np.isneginf(data)
        if a.requires_grad:
            wa = np.where(both_inf, 0.0, np.exp(a.data - np.where(both_inf, 0.0, data)))
            a._accumulate(g * wa)
        if b.requires_grad:
            wb = np.where(both_inf, 0.0, np.exp(b.data - np.where(both_inf, 0.0, data)))
            b._accumulate(g * wb)

    return _result(data, (a, b), bw)


# -- structural ops -----------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(data, tuple(ts), bw)


def take_rows(a, indices) -> Tensor:
    """Gather rows ``a[indices]``; backward scatter-adds into the source."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    return _result(data, (a,), bw)


def scatter_rows(rows, indices, n_rows: int) -> Tensor:
    """Place ``rows[i]`` at position ``indices[i]`` of an otherwise-zero output.

    Indices must be distinct; used to reassemble per-branch expert outputs
    into a full sequence.
    """
    rows = _lift(rows)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.zeros((n_rows,) + rows.data.shape[1:])
    data[idx] = rows.data

    def bw(g):
        rows._accumulate(g[idx])

    return _result(data, (rows,), bw)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _lift(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = a.data[sl].copy()

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        a._accumulate(buf)

    return _result(data, (a,), bw)


def dropout(a, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scale survivors by 1/(1-p) at train time, identity at inference."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout: p must lie in [0, 1), got {p}")
    a = _lift(a)
    if not training or p == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def bw(g):
        a._accumulate(g * mask)

    return _result(a.data * mask, (a,), bw)


def ste_threshold(a) -> Tensor:
    """Hard 0/1 threshold at zero; backward is the identity (straight-through)."""
    a = _lift(a)
    data = (a.data > 0).astype(np.float64)

    def bw(g):
        a._accumulate(g)

    return _result(data, (a,), bw)


# -- optimisation -------------------------------------------------------------


def sgd_step(params, lr: float) -> None:
    """In-place ``value -= lr * grad`` on each parameter, then zero the gradients."""
    if lr < 0:
        raise DomainError(f"sgd_step: lr must be nonnegative, got {lr}")
    for p in params:
        if p._grad is None:
            continue
        if not np.all(np.isfinite(p._grad)):
            raise ContractError(
                f"sgd_step: non-finite gradient in parameter {p.name or '<unnamed>'}"
            )
        p.data -= lr * p._grad
        p._grad = None
    for p in params:
        p._grad = None


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()
