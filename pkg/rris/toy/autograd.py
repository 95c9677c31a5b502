"""Reverse-mode differentiation over float64 numpy arrays.

Every operation returns a ``Var`` that remembers its parents and a closure
mapping the output gradient to one gradient per parent. ``Var.backward``
walks the graph once in reverse topological order.
"""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from rris.errors import ModelError

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn")
    # ndarray operators defer to the reflected Var methods
    __array_ufunc__ = None

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn: Optional[Backward] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable ``grad``; self must be a scalar."""
        if self.value.size != 1:
            raise ModelError(f"backward needs a scalar output, got shape {self.shape}")

        order: List[Var] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value + b.value, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value - b.value, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value * b.value,
        (a, b),
        lambda g: (unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value / b.value
    return Var(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.value, a.shape), unbroadcast(-g * out / b.value, b.shape)),
    )


def matmul(a, b) -> Var:
    """Batched matrix product with numpy broadcasting over leading axes.

    A 1-D operand is a row vector on the left and a column vector on the
    right, and the inserted axis is dropped from the result, as with ``@``.
    """
    a, b = as_var(a), as_var(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ModelError(f"matmul of {a.shape} and {b.shape}", code="shape-mismatch")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ModelError(f"matmul of {a.shape} and {b.shape}", code="shape-mismatch")
    a2 = a.value[None, :] if a.ndim == 1 else a.value
    b2 = b.value[:, None] if b.ndim == 1 else b.value
    full = a2 @ b2

    def backward(g):
        g = g.reshape(full.shape)
        ga = g @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Var(a.value @ b.value, (a, b), backward)


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), lambda g: (_expand(g, a.shape, axis, keepdims),))


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return Var(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Var) -> Var:
    # tanh form stays finite for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def reshape(a: Var, shape) -> Var:
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Var, axes) -> Var:
    inverse = np.argsort(axes)
    return Var(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a: Var, shape) -> Var:
    return Var(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (unbroadcast(g, a.shape),))


def concat(parts: Sequence[Var], axis: int) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    return Var(np.concatenate([p.value for p in parts], axis=axis), parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def softmax(a: Var, axis: int = -1) -> Var:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Var(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Var, axis: int = -1) -> Var:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return Var(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def embed(table: Var, ids: np.ndarray) -> Var:
    """Rows of ``table`` selected by an integer id array."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, ids, g)
        return (grad,)

    return Var(table.value[ids], (table,), backward)


def upsample2x(a: Var) -> Var:
    """Nearest-neighbour x2 upsampling of an [N, H, W, C] map."""
    n, h, w, c = a.shape
    out = a.value.repeat(2, axis=1).repeat(2, axis=2)
    return Var(out, (a,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


def space_to_depth(a: Var, patch: int) -> Var:
    """Non-overlapping ``patch`` x ``patch`` blocks of [N, H, W, C] folded into channels."""
    n, h, w, c = a.shape
    if h % patch or w % patch:
        raise ModelError(f"{h}x{w} map is not divisible into {patch}x{patch} patches", code="shape-mismatch")
    x = reshape(a, (n, h // patch, patch, w // patch, patch, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (n, h // patch, w // patch, patch * patch * c))
