"""Tape-based reverse-mode differentiation over numpy arrays.

Every operation applied to a :class:`Var` appends a node to the owning
:class:`Tape`.  Nodes are recorded in creation order, which is already a
topological order, so :func:`backward` only has to walk the tape in reverse.

The op set is deliberately small: it covers what the propagation branches,
the preference halving layer and the prediction head need.

>>> tape = Tape()
>>> p = tape.parameter("p", np.array(3.0))
>>> backward(tape, p * p)["p"]
array(6.)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tape",
    "Var",
    "backward",
    "matmul",
    "spmm",
    "relu",
    "concat",
    "take_rows",
    "sum_all",
    "mean_all",
    "square",
    "sqrt",
    "batch_norm",
    "dropout",
]


class Tape:
    """Records operations and owns the parameter registry."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def parameter(self, name: str, value) -> "Var":
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        var = Var(np.asarray(value, dtype=np.float64), self, requires_grad=True)
        self.params[name] = var
        return var

    def constant(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self, requires_grad=False)

    def clear(self) -> None:
        """Drop recorded nodes and parameters.

        Vars point back at their tape, so a finished tape is a reference cycle
        that only the cyclic collector would reclaim; training loops call this
        once gradients are taken to free the activations immediately.
        """
        for node in self.nodes:
            node.parents, node.backward_fn = (), None
        self.nodes.clear()
        self.params.clear()

    def _record(self, value, parents: Sequence["Var"], fn: Callable) -> "Var":
        out = Var(value, self, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out.parents = tuple(parents)
            out.backward_fn = fn
            self.nodes.append(out)
        return out


class Var:
    __slots__ = ("value", "tape", "requires_grad", "parents", "backward_fn", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value: np.ndarray, tape: Tape, requires_grad: bool = False):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.parents: tuple[Var, ...] = ()
        self.backward_fn: Callable | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, self._lift(other))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return a.tape._record(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a: Var) -> Var:
    return a.tape._record(-a.value, (a,), lambda g: (-g,))


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape._record(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return a.tape._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(s: sp.spmatrix, x: Var) -> Var:
    """Product of a constant sparse matrix with a dense variable."""
    if s.shape[1] != x.shape[0]:
        raise ValueError(f"spmm shape mismatch: {s.shape} @ {x.shape}")
    st = s.T.tocsr()
    return x.tape._record(np.asarray(s @ x.value), (x,), lambda g: (np.asarray(st @ g),))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape._record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def concat(xs: Sequence[Var], axis: int = 1) -> Var:
    xs = list(xs)
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    return xs[0].tape._record(
        np.concatenate([x.value for x in xs], axis=axis), xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def take_rows(x: Var, idx: np.ndarray) -> Var:
    """Gather ``x[idx]``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def grad(g):
        k = len(idx)
        scatter = sp.csr_matrix((np.ones(k), (idx, np.arange(k))), shape=(n, k))
        return (np.asarray(scatter @ g.reshape(k, -1)).reshape((n,) + g.shape[1:]),)

    return x.tape._record(x.value[idx], (x,), grad)


def sum_all(x: Var) -> Var:
    shape = x.shape
    return x.tape._record(np.array(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Var) -> Var:
    shape, n = x.shape, x.value.size
    return x.tape._record(
        np.array(x.value.mean()), (x,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def square(x: Var) -> Var:
    xv = x.value
    return x.tape._record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sqrt(x: Var) -> Var:
    out = np.sqrt(x.value)
    return x.tape._record(out, (x,), lambda g: (g / (2.0 * out),))


def batch_norm(x: Var, gamma: Var, beta: Var, mean=None, var=None, eps: float = 1e-5):
    """Normalize the columns of ``x`` and apply the learned affine map.

    With ``mean``/``var`` left as None the batch statistics are used and
    differentiated through; otherwise the given statistics are treated as
    constants (inference mode).  Returns ``(out, batch_mean, batch_var)``.
    """
    xv = x.value
    frozen = mean is not None
    if frozen:
        mu, v = np.asarray(mean), np.asarray(var)
    else:
        mu, v = xv.mean(axis=0), xv.var(axis=0)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xv - mu) * inv
    gv = gamma.value
    n = xv.shape[0]

    def grad(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gv
        if frozen:
            dx = dxhat * inv
        else:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    out = x.tape._record(xhat * gv + beta.value, (x, gamma, beta), grad)
    return out, mu, v


def dropout(x: Var, rate: float, rng: np.random.Generator | None) -> Var:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return x.tape._record(x.value * scale, (x,), lambda g: (g * scale,))


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` for every registered parameter.

    Parameters that do not influence ``loss`` get a zero gradient.  The tape is
    left untouched, so calling this twice yields identical results.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for name, var in tape.params.items():
        g = grads.get(id(var))
        out[name] = np.zeros_like(var.value) if g is None else np.asarray(g).reshape(var.shape)
    return out
