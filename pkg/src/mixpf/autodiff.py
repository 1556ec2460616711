"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every operation as an append-only sequence of nodes;
``Var`` is a handle to one node (its index) plus the computed value.
Calling :func:`backward` on a scalar root replays the tape in reverse id
order once, accumulating adjoints via each node's locally stored rule.

The operator set is exactly what the particle filter and the mixture
networks need, including ``stop_gradient`` (identity on values, zero on
gradients) and a numerically stabilised ``logsumexp``.  Everything is
float64; ops are deterministic, so identical tapes replay to bitwise
identical primals and adjoints.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "backward",
    "Gradients",
    "add",
    "subtract",
    "multiply",
    "divide",
    "negate",
    "exp",
    "log",
    "square",
    "sqrt",
    "sin",
    "cos",
    "absolute",
    "relu",
    "matvec",
    "linear",
    "vsum",
    "concat",
    "stack_rows",
    "gather",
    "gather_rows",
    "take_columns",
    "reshape",
    "softmax",
    "logsumexp",
    "stop_gradient",
]


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One computation record: op tag, parent ids, and the adjoint rule.

    ``backward`` maps the node's output adjoint to a tuple of parent
    adjoints (``None`` entries propagate nothing, e.g. stop_gradient).
    Cached primal values live inside the closure.
    """

    __slots__ = ("tag", "parents", "backward", "shape")

    def __init__(self, tag, parents, backward, shape):
        self.tag = tag
        self.parents = parents
        self.backward = backward
        self.shape = shape


class Var:
    """Immutable handle to a tape node: index plus computed value."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape, nid, value):
        self.tape = tape
        self.id = nid
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, value={self.value!r})"

    # arithmetic sugar; plain numbers/arrays are lifted to constant leaves
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(self.tape, other), self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(_lift(self.tape, other), self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(_lift(self.tape, other), self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(_lift(self.tape, other), self)

    def __neg__(self):
        return negate(self)


class Tape:
    """Append-only computation graph; single-threaded by construction."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _emit(self, tag, parents, backward, value) -> Var:
        value = _as_array(value)
        nid = len(self.nodes)
        self.nodes.append(Node(tag, parents, backward, value.shape))
        return Var(self, nid, value)

    def var(self, value, tag="leaf") -> Var:
        """Create a leaf variable (parameter or input)."""
        return self._emit(tag, (), None, value)

    def constant(self, value) -> Var:
        """Create a leaf whose gradient is never of interest."""
        return self._emit("const", (), None, value)


class Gradients:
    """Adjoint map produced by :func:`backward`; node id -> array."""

    def __init__(self, tape, adjoints):
        self._tape = tape
        self._adjoints = adjoints

    def wrt(self, var: Var) -> np.ndarray:
        g = self._adjoints[var.id] if var.id < len(self._adjoints) else None
        if g is None:
            return np.zeros(self._tape.nodes[var.id].shape)
        return g


def backward(root: Var) -> Gradients:
    """Reverse pass from a scalar root; visits each node exactly once.

    Unused leaves report zero adjoints.  Raises ``ValueError`` for a
    non-scalar root.
    """
    if root.value.shape != ():
        raise ValueError(f"backward requires a scalar root, got shape {root.value.shape}")
    tape = root.tape
    adjoints: list = [None] * (root.id + 1)
    adjoints[root.id] = np.ones(())
    for nid in range(root.id, -1, -1):
        out_adj = adjoints[nid]
        if out_adj is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None:
            continue
        for pid, g in zip(node.parents, node.backward(out_adj)):
            if g is None:
                continue
            if adjoints[pid] is None:
                adjoints[pid] = g
            else:
                adjoints[pid] = adjoints[pid] + g
    return Gradients(tape, adjoints)


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _tape_of(a, b) -> Tape:
    if isinstance(a, Var):
        if isinstance(b, Var) and b.tape is not a.tape:
            raise ValueError("operands live on different tapes")
        return a.tape
    return b.tape


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum an adjoint down to the shape of the broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting, adjoints summed back to shape)

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    ash, bsh = a.value.shape, b.value.shape

    def back(g):
        return (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return tape._emit("add", (a.id, b.id), back, a.value + b.value)


def subtract(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    ash, bsh = a.value.shape, b.value.shape

    def back(g):
        return (_unbroadcast(g, ash), _unbroadcast(-g, bsh))

    return tape._emit("sub", (a.id, b.id), back, a.value - b.value)


def multiply(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value

    def back(g):
        return (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return tape._emit("mul", (a.id, b.id), back, av * bv)


def divide(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = av / bv

    def back(g):
        return (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        )

    return tape._emit("div", (a.id, b.id), back, out)


# ---------------------------------------------------------------------------
# elementwise unary ops

def negate(a: Var) -> Var:
    return a.tape._emit("neg", (a.id,), lambda g: (-g,), -a.value)


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._emit("exp", (a.id,), lambda g: (g * out,), out)


def log(a: Var) -> Var:
    av = a.value
    return a.tape._emit("log", (a.id,), lambda g: (g / av,), np.log(av))


def square(a: Var) -> Var:
    av = a.value
    return a.tape._emit("square", (a.id,), lambda g: (g * (2.0 * av),), av * av)


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape._emit("sqrt", (a.id,), lambda g: (g * (0.5 / out),), out)


def sin(a: Var) -> Var:
    av = a.value
    return a.tape._emit("sin", (a.id,), lambda g: (g * np.cos(av),), np.sin(av))


def cos(a: Var) -> Var:
    av = a.value
    return a.tape._emit("cos", (a.id,), lambda g: (g * (-np.sin(av)),), np.cos(av))


def absolute(a: Var) -> Var:
    # adjoint uses sign(x), which is 0 at x = 0 (measure-zero kink)
    av = a.value
    return a.tape._emit("abs", (a.id,), lambda g: (g * np.sign(av),), np.abs(av))


def relu(a: Var) -> Var:
    # derivative defined as 0 at the kink
    mask = (a.value > 0).astype(np.float64)
    return a.tape._emit("relu", (a.id,), lambda g: (g * mask,), a.value * mask)


# ---------------------------------------------------------------------------
# linear algebra

def matvec(A: Var, x: Var) -> Var:
    """Matrix-vector product A @ x for A (m, n) and x (n,)."""
    tape = _tape_of(A, x)
    A, x = _lift(tape, A), _lift(tape, x)
    Av, xv = A.value, x.value

    def back(g):
        return (np.outer(g, xv), Av.T @ g)

    return tape._emit("matvec", (A.id, x.id), back, Av @ xv)


def linear(X: Var, A: Var, b: Var) -> Var:
    """Batched affine map X @ A.T + b for X (n, d_in), A (d_out, d_in), b (d_out,)."""
    tape = _tape_of(X, A)
    X, A, b = _lift(tape, X), _lift(tape, A), _lift(tape, b)
    Xv, Av = X.value, A.value

    def back(g):
        return (g @ Av, g.T @ Xv, g.sum(axis=0))

    return tape._emit("linear", (X.id, A.id, b.id), back, Xv @ Av.T + b.value)


# ---------------------------------------------------------------------------
# reductions and reshaping

def vsum(a: Var, axis=None) -> Var:
    """Sum of all elements (axis=None) or along one axis."""
    av = a.value

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return a.tape._emit("sum", (a.id,), back, av.sum(axis=axis))


def reshape(a: Var, shape) -> Var:
    av = a.value
    return a.tape._emit(
        "reshape", (a.id,), lambda g: (g.reshape(av.shape),), av.reshape(shape)
    )


def concat(parts, axis=0) -> Var:
    """Concatenate 1-d or 2-d vars along an axis."""
    if not parts:
        raise ValueError("concat of an empty sequence")
    tape = parts[0].tape
    parts = [_lift(tape, p) for p in parts]
    values = [p.value for p in parts]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(values))
        )

    return tape._emit(
        "concat", tuple(p.id for p in parts), back, np.concatenate(values, axis=axis)
    )


def stack_rows(rows) -> Var:
    """Stack S vars of shape (n,) into an (S, n) matrix."""
    tape = rows[0].tape
    rows = [_lift(tape, r) for r in rows]

    def back(g):
        return tuple(g[i] for i in range(len(rows)))

    return tape._emit(
        "stack", tuple(r.id for r in rows), back, np.stack([r.value for r in rows])
    )


# ---------------------------------------------------------------------------
# gathers (adjoints scatter-add: repeated indices accumulate)

def gather(a: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.intp)
    av = a.value

    def back(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._emit("gather", (a.id,), back, av[idx])


def gather_rows(a: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.intp)
    av = a.value

    def back(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._emit("gather_rows", (a.id,), back, av[idx, :])


def take_columns(a: Var, cols) -> Var:
    """Select columns of a 2-d var (slice or arbitrary index vector)."""
    cols = np.asarray(cols, dtype=np.intp)
    av = a.value

    def back(g):
        out = np.zeros_like(av)
        np.add.at(out.T, cols, g.T)
        return (out,)

    return a.tape._emit("take_cols", (a.id,), back, av[:, cols])


# ---------------------------------------------------------------------------
# softmax / logsumexp / stop-gradient

def softmax(a: Var, axis=None) -> Var:
    ax = 0 if axis is None and a.value.ndim == 1 else axis
    if ax is None:
        raise ValueError("softmax needs an explicit axis for >1-d input")
    z = a.value - a.value.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        inner = (g * s).sum(axis=ax, keepdims=True)
        return (s * (g - inner),)

    return a.tape._emit("softmax", (a.id,), back, s)


def logsumexp(a: Var, axis=None) -> Var:
    """max-shifted log-sum-exp; adjoint is the softmax of the input."""
    av = a.value
    if av.size == 0:
        raise ValueError("logsumexp of an empty input")
    m = av.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        if np.isneginf(m).any():
            raise FloatingPointError("logsumexp: all entries are -inf")
        raise FloatingPointError("logsumexp: non-finite input")
    e = np.exp(av - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = m + np.log(tot)
    sm = e / tot

    def back(g):
        if axis is None:
            return (g * sm,)
        return (np.expand_dims(g, axis) * sm,)

    value = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return a.tape._emit("logsumexp", (a.id,), back, value)


def stop_gradient(a: Var) -> Var:
    """Identity on the primal; the backward pass propagates nothing."""
    return a.tape._emit("stop_grad", (a.id,), lambda g: (None,), a.value)
