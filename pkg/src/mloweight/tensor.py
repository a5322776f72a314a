"""Dense f64 tensors with define-by-run reverse-mode differentiation.

Every primitive that touches a tensor flagged ``requires_grad`` records a
:class:`Node` holding its inputs and a closure mapping the output gradient to
input gradients. :func:`backward` collects the recorded subgraph of a scalar
root into a :class:`Tape` (nodes in creation order, which is a topological
order) and replays it in reverse.

Only first-order derivatives are supported. Second-order quantities are
obtained elsewhere by differencing gradients.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Node",
    "Tape",
    "tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "bias_add",
    "tanh",
    "relu",
    "softmax",
    "sum",
    "mean",
    "square",
    "log",
    "stack",
    "take",
    "backward",
    "grad_of",
]

_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        listed = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class Node:
    __slots__ = ("seq", "op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], vjp: Callable):
        self.seq = next(_counter)
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.output: Tensor | None = None


class Tensor:
    """A dense row-major f64 array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.node = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = Node(op, tuple(inputs), vjp)
        node.output = out
        out.node = node
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _elementwise_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    # undo scalar broadcast
    if g.shape == like.shape:
        return g
    return np.full(like.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes("add", a, b)
    out = a.data + b.data
    return _record("add", (a, b), out, lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes("sub", a, b)
    out = a.data - b.data
    return _record("sub", (a, b), out, lambda g: (_reduce_to(g, a), -_reduce_to(g, b)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may be a single-element tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _record("mul", (a, b), out, lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def bias_add(x, b) -> Tensor:
    """Add a bias vector of shape (k,) to every row of an (m, k) matrix."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError("bias_add", x.shape, b.shape)
    return _record("bias_add", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def softmax(a) -> Tensor:
    """Softmax along the last axis."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True) if a.data.size else a.data
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True) if a.data.size else e

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), y, vjp)


def sum(a) -> Tensor:  # noqa: A001 - mirrors the primitive name
    a = _as_tensor(a)
    shape = a.shape
    return _record("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean", a.shape)
    shape = a.shape
    return _record("mean", (a,), np.array(a.data.mean()), lambda g: (np.full(shape, float(g) / n),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def stack(items: Sequence) -> Tensor:
    """Stack single-element tensors into a vector of shape (len(items),)."""
    ts = [_as_tensor(t) for t in items]
    for t in ts:
        if t.data.size != 1:
            raise ShapeError("stack", *(u.shape for u in ts))
    out = np.array([float(t.data.reshape(())) for t in ts])
    return _record("stack", ts, out, lambda g: tuple(np.full(t.shape, g[i]) for i, t in enumerate(ts)))


def take(a, i: int) -> Tensor:
    """Entry ``i`` of a vector as a scalar tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 1 or not -a.shape[0] <= i < a.shape[0]:
        raise ShapeError("take", a.shape, (i,))
    n = a.shape[0]

    def vjp(g):
        out = np.zeros(n)
        out[i] = float(g)
        return (out,)

    return _record("take", (a,), np.array(a.data[i]), vjp)


class Tape:
    """Recorded nodes of one scalar's subgraph, in creation (topological) order."""

    def __init__(self, nodes: Iterable[Node]):
        self.nodes: list[Node] = sorted(nodes, key=lambda n: n.seq)

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack_ = [root.node] if root.node is not None else []
        while stack_:
            node = stack_.pop()
            if node.seq in seen:
                continue
            seen[node.seq] = node
            for t in node.inputs:
                if t.node is not None and t.node.seq not in seen:
                    stack_.append(t.node)
        return cls(seen.values())

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every requires-grad ancestor."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape.collect(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves: dict[int, Tensor] = {}
    if root.node is None:
        leaves[id(root)] = root
    for node in reversed(tape.nodes):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g.copy() if out.grad is None else out.grad + g
        for t, gi in zip(node.inputs, node.vjp(g)):
            if not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
            if t.node is None:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key].reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad_of(scalar_fn: Callable, params):
    """Gradient of ``scalar_fn(tensors)`` with respect to a ParamVector.

    ``scalar_fn`` receives a mapping of entry name to leaf tensor and must
    return a scalar tensor. The ParamVector itself is not modified.
    """
    leaves = params.tensors(requires_grad=True)
    out = scalar_fn(leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = out.shape if isinstance(out, Tensor) else type(out).__name__
        raise ValueError(f"grad_of: loss must be a scalar tensor, got {shape}")
    backward(out)
    flat = np.zeros(params.total_len)
    for name, (lo, hi) in params.slices().items():
        g = leaves[name].grad
        if g is not None:
            flat[lo:hi] = g.ravel()
    return params.like(flat)
