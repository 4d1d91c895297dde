"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Node` objects
in creation order. Because a node can only reference nodes that already exist,
the recorded graph is acyclic by construction and a single reverse sweep over
the node list visits every node exactly once.

Example
-------
>>> tape = Tape()
>>> x = tape.leaf(3.0, trainable=True)
>>> y = x * x
>>> float(y.value)
9.0
>>> float(tape.gradient(y, [x])[0])
6.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Node",
    "Tape",
    "forward",
    "backward",
    "finite_difference_gradient",
    "matmul",
    "add",
    "mul",
    "neg",
    "scale",
    "exp",
    "log",
    "sigmoid",
    "log_sigmoid",
    "softmax",
    "log_softmax",
    "gather_rows",
    "take_last",
    "sum",
    "mean",
    "concat",
    "transpose",
    "custom",
]

MAX_RANK = 3


class ShapeError(ValueError):
    """Raised when an operation receives operands of incompatible shape."""


class NonFiniteError(ValueError, FloatingPointError):
    """NaN or infinity reached an op that cannot accept it."""


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out axes that numpy broadcasting introduced or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    """A value recorded on a tape.

    ``parents`` are indices of earlier nodes; ``vjp`` maps the upstream
    gradient to one gradient per parent (``None`` for leaves).
    """

    __slots__ = ("tape", "index", "value", "parents", "vjp", "op", "trainable")

    def __init__(self, tape, index, value, parents, vjp, op, trainable=False):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.trainable = trainable

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, index={self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Node) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of operations.

    ``record=False`` evaluates without saving backward rules, for inference
    passes that never need gradients.
    """

    def __init__(self, record: bool = True):
        self.nodes: list[Node] = []
        self.record = record
        self.inputs: list[Node] = []
        self.outputs: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, trainable: bool = False) -> Node:
        node = Node(self, len(self.nodes), _as_array(value), (), None, "leaf", trainable)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.leaf(value, trainable=False)

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.constant(x)

    def record_op(self, op: str, value: np.ndarray, parents: Sequence[Node], vjp) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if self.record:
            node = Node(self, len(self.nodes), value, tuple(p.index for p in parents), vjp, op)
        else:
            node = Node(self, len(self.nodes), value, (), None, op)
        self.nodes.append(node)
        return node

    def gradient(self, outputs, wrt: Sequence[Node], seeds=None) -> list[np.ndarray]:
        """Gradients of ``sum(seed * output)`` over all outputs w.r.t. ``wrt``."""
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        if isinstance(outputs, Node):
            outputs = [outputs]
        if seeds is None:
            seeds = [np.ones_like(o.value) for o in outputs]
        elif not isinstance(seeds, (list, tuple)):
            seeds = [seeds]
        if len(seeds) != len(outputs):
            raise ValueError("one seed per output is required")

        grads: list = [None] * len(self.nodes)
        last = -1
        for out, seed in zip(outputs, seeds):
            seed = _as_array(seed)
            if seed.shape != out.shape:
                raise ShapeError(f"backward: seed shape {seed.shape} != output shape {out.shape}")
            grads[out.index] = seed if grads[out.index] is None else grads[out.index] + seed
            last = max(last, out.index)

        for idx in range(last, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg

        result = []
        for node in wrt:
            g = grads[node.index]
            result.append(np.zeros_like(node.value) if g is None else g)
        return result


# --------------------------------------------------------------------------
# operations


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite input")


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape._lift(a), tape._lift(b)
    A, B = a.value, b.value
    if A.ndim < 1 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    if A.ndim < 2:
        raise ShapeError(f"matmul: left operand must be at least rank 2, got {A.shape}")
    out = np.matmul(A, B)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return tape.record_op("matmul", out, (a, b), vjp)


def _broadcast_shape(op, sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}") from None


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape._lift(a), tape._lift(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return tape.record_op(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape._lift(a), tape._lift(b)
    _broadcast_shape("mul", a.shape, b.shape)
    A, B = a.value, b.value
    return tape.record_op(
        "mul",
        A * B,
        (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def neg(a: Node) -> Node:
    return a.tape.record_op("neg", -a.value, (a,), lambda g: (-g,))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record_op("scale", a.value * c, (a,), lambda g: (g * c,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape.record_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    x = a.value
    _check_finite("log", x)
    if np.any(x <= 0):
        raise ValueError("log: input must be strictly positive")
    return a.tape.record_op("log", np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Node) -> Node:
    x = a.value
    out = np.exp(-np.logaddexp(0.0, -x))
    return a.tape.record_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Node) -> Node:
    """``log(sigmoid(x))`` evaluated without overflow for large ``|x|``."""
    x = a.value
    out = -np.logaddexp(0.0, -x)
    s_neg = np.exp(-np.logaddexp(0.0, x))  # sigmoid(-x)
    return a.tape.record_op("log_sigmoid", out, (a,), lambda g: (g * s_neg,))


def softmax(a: Node) -> Node:
    x = a.value
    _check_finite("softmax", x)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return a.tape.record_op("softmax", out, (a,), vjp)


def log_softmax(a: Node) -> Node:
    x = a.value
    _check_finite("log_softmax", x)
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return a.tape.record_op("log_softmax", out, (a,), vjp)


def gather_rows(table: Node, idx) -> Node:
    """``table[idx]`` for an integer index array of any shape (embedding lookup)."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows: indices must be integers")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    if idx.ndim + table.value.ndim - 1 > MAX_RANK:
        raise ShapeError("gather_rows: result rank exceeds the supported maximum")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return table.tape.record_op("gather_rows", table.value[idx], (table,), vjp)


def take_last(a: Node, idx) -> Node:
    """Select one entry along the last axis per leading position."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_last: index shape {idx.shape} != leading shape {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise IndexError("take_last: index out of range")
    expanded = idx[..., None]
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.put_along_axis(out, expanded, g[..., None], axis=-1)
        return (out,)

    out = np.take_along_axis(a.value, expanded, axis=-1)[..., 0]
    return a.tape.record_op("take_last", out, (a,), vjp)


def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record_op("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    tape = _tape_of(*parts)
    parts = [tape._lift(p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record_op("concat", out, parts, vjp)


def transpose(a: Node) -> Node:
    """Swap the last two axes."""
    if a.value.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got {a.shape}")
    return a.tape.record_op(
        "transpose", np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def custom(op: str, value, parents: Sequence, vjp) -> Node:
    """Register an externally-differentiated operation on the parents' tape."""
    tape = _tape_of(*parents)
    parents = [tape._lift(p) for p in parents]
    return tape.record_op(op, value, parents, vjp)


# --------------------------------------------------------------------------
# functional entry points


def forward(builder: Callable, inputs: Sequence, trainable: Sequence[bool] | None = None):
    """Run ``builder`` on fresh leaves and return ``(output values, tape)``.

    By default every input is marked trainable.
    """
    tape = Tape()
    if trainable is None:
        trainable = [True] * len(inputs)
    leaves = [tape.leaf(x, trainable=t) for x, t in zip(inputs, trainable)]
    tape.inputs = leaves
    outs = builder(*leaves)
    if isinstance(outs, Node):
        outs = [outs]
    tape.outputs = list(outs)
    return [o.value for o in tape.outputs], tape


def backward(tape: Tape, seed=None) -> list[np.ndarray]:
    """Gradients of the seeded outputs w.r.t. each trainable input of ``tape``."""
    if not tape.outputs:
        raise ValueError("tape has no recorded outputs; build it with forward()")
    trainables = [n for n in tape.inputs if n.trainable]
    return tape.gradient(tape.outputs, trainables, seeds=seed)


def finite_difference_gradient(fn: Callable, point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(x.copy()))
        flat[i] = orig - step
        lo = float(fn(x.copy()))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"non-finite function value when probing coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad
