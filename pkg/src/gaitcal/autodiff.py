"""Array-valued reverse-mode automatic differentiation.

A small tape: every operation builds a `Var` node holding its ndarray value
and a closure that routes the incoming cotangent to the parents. Gradients
are accumulated by walking the graph in reverse topological order. Only the
operations the fitting engine actually needs are implemented; correctness is
gated by finite-difference checks in the inference module.

Constants (plain ndarrays / floats) may be mixed freely with `Var` operands;
they simply receive no gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special as _special

__all__ = [
    "Var",
    "leaf",
    "value_of",
    "custom_op",
    "matmul",
    "vsum",
    "vmean",
    "reshape",
    "swapaxes",
    "take",
    "where",
    "concat",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "erf",
    "vabs",
    "relu",
    "softplus",
    "logdet_psd",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """Node in the computation graph: an ndarray value plus backward plumbing."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    # make ndarray <op> Var dispatch to the reflected Var operator instead of
    # numpy's elementwise object broadcasting
    __array_ufunc__ = None

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Var", ...] = (),
        vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def backward(self) -> None:
        """Accumulate gradients of this (scalar) node into every leaf."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.value.shape)
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None else g
                else:
                    parent.grad = parent.grad + g

    # -- operator overloads -------------------------------------------------

    def __add__(self, other):
        a, b = self, other
        bv = value_of(b)
        out = Var(self.value + bv)
        if isinstance(b, Var):
            out._parents, out._vjp = (a, b), lambda g: (g, g)
        else:
            out._parents, out._vjp = (a,), lambda g: (g,)
        return out

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Var) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        bv = value_of(other)
        out = Var(self.value * bv)
        if isinstance(other, Var):
            out._parents = (self, other)
            out._vjp = lambda g: (g * bv, g * self.value)
        else:
            out._parents, out._vjp = (self,), lambda g: (g * bv,)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        bv = value_of(other)
        out = Var(self.value / bv)
        if isinstance(other, Var):
            out._parents = (self, other)
            out._vjp = lambda g: (g / bv, -g * self.value / (bv * bv))
        else:
            out._parents, out._vjp = (self,), lambda g: (g / bv,)
        return out

    def __rtruediv__(self, other):
        bv = np.asarray(value_of(other))
        out = Var(bv / self.value)
        out._parents = (self,)
        out._vjp = lambda g: (-g * bv / (self.value * self.value),)
        return out

    def __pow__(self, exponent: float):
        if isinstance(exponent, Var):
            raise TypeError("only constant exponents are supported")
        e = float(exponent)
        out = Var(self.value**e)
        out._parents = (self,)
        out._vjp = lambda g: (g * e * self.value ** (e - 1.0),)
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        return float(self.value)


def leaf(value) -> Var:
    """Differentiable input node."""
    return Var(np.array(value, dtype=np.float64))


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def custom_op(value, parents: tuple[Var, ...], vjp) -> Var:
    """Wrap an externally computed forward result with a hand-written vjp."""
    return Var(value, parents, vjp)


# -- shape ops ---------------------------------------------------------------


def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return Var(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Var, a: int, b: int) -> Var:
    return Var(np.swapaxes(x.value, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def take(x: Var, idx) -> Var:
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros_like(x.value)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Var(x.value[idx], (x,), vjp)


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    vals = [value_of(x) for x in xs]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    var_parents = tuple(x for x in xs if isinstance(x, Var))

    def vjp(g):
        grads = []
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if isinstance(x, Var):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                grads.append(g[tuple(sl)])
        return tuple(grads)

    return Var(np.concatenate(vals, axis=axis), var_parents, vjp)


# -- reductions ---------------------------------------------------------------


def vsum(x: Var, axis=None, keepdims: bool = False) -> Var:
    shape = x.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Var(x.value.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def vmean(x: Var, axis=None, keepdims: bool = False) -> Var:
    n = x.value.size if axis is None else np.prod([x.value.shape[a] for a in np.atleast_1d(axis)])
    return vsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Var:
    av, bv = value_of(a), value_of(b)
    out = Var(np.matmul(av, bv))
    parents, slots = [], []
    if isinstance(a, Var):
        parents.append(a)
        slots.append(0)
    if isinstance(b, Var):
        parents.append(b)
        slots.append(1)

    def vjp(g):
        grads = []
        for s in slots:
            if s == 0:
                ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if bv.ndim > 1 else np.expand_dims(g, -1) * bv
                grads.append(_unbroadcast(ga, av.shape))
            else:
                gb = np.matmul(np.swapaxes(av, -1, -2), g) if av.ndim > 1 else np.expand_dims(av, -1) * np.expand_dims(g, -2)
                grads.append(_unbroadcast(gb, bv.shape))
        return tuple(grads)

    out._parents, out._vjp = tuple(parents), vjp
    return out


def logdet_psd(x: Var) -> Var:
    """log det of (batched) symmetric positive-definite matrices."""
    sign, ld = np.linalg.slogdet(x.value)
    if np.any(sign <= 0):
        raise np.linalg.LinAlgError("matrix is not positive definite")
    inv = np.linalg.inv(x.value)

    def vjp(g):
        return (np.expand_dims(np.expand_dims(g, -1), -1) * np.swapaxes(inv, -1, -2),)

    return Var(ld, (x,), vjp)


# -- elementwise ----------------------------------------------------------------


def exp(x: Var) -> Var:
    v = np.exp(x.value)
    return Var(v, (x,), lambda g: (g * v,))


def log(x: Var) -> Var:
    return Var(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(x: Var) -> Var:
    v = np.sqrt(x.value)
    return Var(v, (x,), lambda g: (g * 0.5 / v,))


def sin(x: Var) -> Var:
    return Var(np.sin(x.value), (x,), lambda g: (g * np.cos(x.value),))


def cos(x: Var) -> Var:
    return Var(np.cos(x.value), (x,), lambda g: (-g * np.sin(x.value),))


_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


def erf(x: Var) -> Var:
    v = _special.erf(x.value)
    return Var(v, (x,), lambda g: (g * _TWO_OVER_SQRT_PI * np.exp(-x.value * x.value),))


def vabs(x: Var) -> Var:
    return Var(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),))


def relu(x: Var) -> Var:
    return Var(np.maximum(x.value, 0.0), (x,), lambda g: (g * (x.value > 0.0),))


def softplus(x: Var) -> Var:
    v = np.logaddexp(0.0, x.value)
    return Var(v, (x,), lambda g: (g * _special.expit(x.value),))


def where(cond, a, b) -> Var:
    cond = np.asarray(cond, dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = Var(np.where(cond, av, bv))
    parents, slots = [], []
    if isinstance(a, Var):
        parents.append(a)
        slots.append(0)
    if isinstance(b, Var):
        parents.append(b)
        slots.append(1)

    def vjp(g):
        grads = []
        for s in slots:
            grads.append(np.where(cond, g, 0.0) if s == 0 else np.where(cond, 0.0, g))
        return tuple(grads)

    out._parents, out._vjp = tuple(parents), vjp
    return out
