"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records operations on ``Var`` wrappers in creation order; since
every operand must already exist when an op runs, the node list is a valid
topological order and the backward sweep is a single reverse iteration.
Only the handful of operations the right-hand sides and networks need are
implemented; everything stays vectorized numpy, so the overhead per node is
one Python object and one closure.

Gradients follow the usual convention: for y = f(x), ``vjp(g)`` returns
g^T (dy/dx) for each parent x. Broadcasting is supported for elementwise
ops; gradients are summed back to the parent's shape.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum over leading axes added by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Var:
    """A node in the tape: holds a numpy value and its accumulated gradient."""

    __slots__ = ("value", "grad", "_vjp", "_parents", "_tape")

    # make ndarray <op> Var defer to the reflected Var operators instead of
    # broadcasting over the Var object
    __array_ufunc__ = None

    def __init__(self, value, tape, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self._tape = tape
        tape._nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def _new(self, value, parents, vjp):
        return Var(value, self._tape, parents, vjp)

    # ---- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Var):
            return self._new(
                self.value + other.value,
                (self, other),
                lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
            )
        return self._new(self.value + other, (self,), lambda g: (_unbroadcast(g, self.shape),))

    __radd__ = __add__

    def __neg__(self):
        return self._new(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Var):
            return self._new(
                self.value - other.value,
                (self, other),
                lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
            )
        return self._new(self.value - other, (self,), lambda g: (_unbroadcast(g, self.shape),))

    def __rsub__(self, other):
        return self._new(other - self.value, (self,), lambda g: (_unbroadcast(-g, self.shape),))

    def __mul__(self, other):
        if isinstance(other, Var):
            a, b = self.value, other.value
            return self._new(
                a * b,
                (self, other),
                lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)),
            )
        return self._new(
            self.value * other, (self,), lambda g: (_unbroadcast(g * other, self.shape),)
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            a, b = self.value, other.value
            return self._new(
                a / b,
                (self, other),
                lambda g: (
                    _unbroadcast(g / b, self.shape),
                    _unbroadcast(-g * a / (b * b), other.shape),
                ),
            )
        return self._new(
            self.value / other, (self,), lambda g: (_unbroadcast(g / other, self.shape),)
        )

    def __rtruediv__(self, other):
        b = self.value
        return self._new(other / b, (self,), lambda g: (_unbroadcast(-g * other / (b * b), self.shape),))

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("only scalar exponents are supported")
        v = self.value
        return self._new(v**n, (self,), lambda g: (g * n * v ** (n - 1),))

    # ---- reductions / structure -------------------------------------------------

    def sum(self):
        return self._new(
            self.value.sum(), (self,), lambda g: (np.broadcast_to(g, self.shape).copy(),)
        )

    def __getitem__(self, idx):
        def vjp(g):
            out = np.zeros(self.shape)
            np.add.at(out, idx, g)
            return (out,)

        return self._new(self.value[idx], (self,), vjp)

    def reshape(self, shape):
        old = self.shape
        return self._new(self.value.reshape(shape), (self,), lambda g: (g.reshape(old),))


# ---- free functions on Var | ndarray (dispatching) --------------------------


def _is_var(x):
    return isinstance(x, Var)


def exp(x):
    if _is_var(x):
        v = np.exp(x.value)
        return x._new(v, (x,), lambda g: (g * v,))
    return np.exp(x)


def log(x):
    if _is_var(x):
        return x._new(np.log(x.value), (x,), lambda g: (g / x.value,))
    return np.log(x)


def absolute(x):
    if _is_var(x):
        s = np.sign(x.value)
        return x._new(np.abs(x.value), (x,), lambda g: (g * s,))
    return np.abs(x)


def leaky_relu(x, slope):
    if _is_var(x):
        d = np.where(x.value > 0.0, 1.0, slope)
        return x._new(x.value * d, (x,), lambda g: (g * d,))
    return x * np.where(x > 0.0, 1.0, slope)


def concatenate(parts):
    if any(_is_var(p) for p in parts):
        tape = next(p._tape for p in parts if _is_var(p))
        vals = [p.value if _is_var(p) else np.asarray(p, dtype=float) for p in parts]
        sizes = [v.shape[0] for v in vals]
        offs = np.cumsum([0] + sizes)
        var_parents = [(i, p) for i, p in enumerate(parts) if _is_var(p)]

        def vjp(g):
            return tuple(g[offs[i] : offs[i + 1]] for i, _ in var_parents)

        return Var(np.concatenate(vals), tape, tuple(p for _, p in var_parents), vjp)
    return np.concatenate(parts)


def matvec(op, x):
    """Multiply by a fixed sparse matrix. `op` is a LinOp (holds A and A^T)."""
    if _is_var(x):
        return x._new(op.mat @ x.value, (x,), lambda g: (op.mat_t @ g,))
    return op.mat @ x


def dot(x, w):
    """Dense matmul x @ w where either side may be a Var. x: (n, d), w: (d, h)."""
    xv = x.value if _is_var(x) else x
    wv = w.value if _is_var(w) else w
    out = xv @ wv
    if _is_var(x) and _is_var(w):
        return x._new(out, (x, w), lambda g: (g @ wv.T, xv.T @ g))
    if _is_var(x):
        return x._new(out, (x,), lambda g: (g @ wv.T,))
    if _is_var(w):
        return w._new(out, (w,), lambda g: (xv.T @ g,))
    return out


def value_of(x):
    return x.value if _is_var(x) else x


class LinOp:
    """A fixed sparse matrix together with its transpose, for matvec VJPs."""

    __slots__ = ("mat", "mat_t")

    def __init__(self, mat):
        self.mat = mat.tocsr()
        self.mat_t = self.mat.T.tocsr()


class Tape:
    """Records Vars in creation order; backward() runs one reverse sweep."""

    def __init__(self):
        self._nodes = []

    def leaf(self, value):
        return Var(value, self)

    def custom(self, value, parents, vjp):
        """Insert a node with a user-supplied VJP (e.g. a linear solve)."""
        return Var(value, self, tuple(parents), vjp)

    def backward(self, seeds):
        """Accumulate gradients into every node's .grad.

        seeds: dict mapping output Var -> gradient array of the same shape.
        Leaf gradients that were already set (e.g. by a previous sweep) are
        accumulated into, not overwritten.
        """
        for var, g in seeds.items():
            g = np.asarray(g, dtype=float)
            var.grad = g if var.grad is None else var.grad + g
        for node in reversed(self._nodes):
            if node.grad is None or node._vjp is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=float, copy=True)
                else:
                    parent.grad = parent.grad + pg
