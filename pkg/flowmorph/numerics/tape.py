"""
Reverse-mode differentiation over numpy arrays.

Every operation on a ``Var`` computes its value eagerly. While a ``GradTape``
is active in the current thread, operations whose inputs live on that tape are
appended to it together with their vector-Jacobian products, so the tape is
always in topological order. Without an active tape the same code runs as
plain numpy arithmetic.
"""

import logging
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

_local = threading.local()

ArrayLike = Union["Var", np.ndarray, float, int]


def _tape_stack() -> List["GradTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["GradTape"]:
    """Return the innermost tape active in this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Record of a forward computation, consumed once by ``backprop_scalar``."""

    def __init__(self):
        self.nodes: List["Var"] = []
        self.watched: Dict[str, "Var"] = {}
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def watch(self, value, name: str) -> "Var":
        """
        Register a trainable leaf.

        Args:
            value: Initial array (copied)
            name: Key under which its gradient is reported

        Returns:
            Var: Leaf recorded on this tape
        """
        if self.consumed:
            raise RuntimeError("Cannot watch values on a consumed tape")
        if name in self.watched:
            raise ValueError(f"Duplicate watched name: {name}")

        var = Var(np.array(value, dtype=np.float64, copy=True))
        self._record(var)
        self.watched[name] = var
        return var

    def _record(self, var: "Var") -> None:
        var.tape = self
        var.index = len(self.nodes)
        self.nodes.append(var)

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """Array value with an optional place on a gradient tape."""

    __slots__ = ("value", "parents", "tape", "index")

    # Keep numpy from absorbing Var into object arrays on ndarray <op> Var.
    __array_ufunc__ = None

    def __init__(self, value, parents: Tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.tape: Optional[GradTape] = None
        self.index = -1

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self) -> str:
        state = "tracked" if self.tracked else "const"
        return f"Var(shape={self.value.shape}, {state})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_var(x: ArrayLike) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value_of(x: ArrayLike) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _node(value, parents: Sequence[Tuple[Var, Callable]]) -> Var:
    out = Var(value)
    tape = active_tape()
    if tape is None:
        return out

    live = tuple((p, fn) for p, fn in parents if p.tape is tape)
    if live:
        out.parents = live
        tape._record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(g, sb)),
    ))


def sub(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: -_unbroadcast(g, sb)),
    ))


def mul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _node(av * bv, (
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ))


def div(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv
    return _node(out, (
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
    ))


def neg(a: ArrayLike) -> Var:
    a = as_var(a)
    return _node(-a.value, ((a, lambda g: -g),))


def matmul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2:
        raise ValueError(f"matmul expects 1-D or 2-D operands, got {av.shape} and {bv.shape}")

    if av.ndim == 1 and bv.ndim == 1:
        grad_a = lambda g: g * bv
        grad_b = lambda g: g * av
    elif av.ndim == 1:
        grad_a = lambda g: bv @ g
        grad_b = lambda g: np.outer(av, g)
    elif bv.ndim == 1:
        grad_a = lambda g: np.outer(g, bv)
        grad_b = lambda g: av.T @ g
    else:
        grad_a = lambda g: g @ bv.T
        grad_b = lambda g: av.T @ g

    return _node(av @ bv, ((a, grad_a), (b, grad_b)))


def exp(a: ArrayLike) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _node(out, ((a, lambda g: g * out),))


def tanh(a: ArrayLike) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return _node(out, ((a, lambda g: g * (1.0 - out * out)),))


def sqrt(a: ArrayLike) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return _node(out, ((a, lambda g: g * 0.5 / out),))


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Var:
    """Select elementwise by a constant boolean mask."""
    a, b = as_var(a), as_var(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return _node(np.where(mask, a.value, b.value), (
        (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), sa)),
        (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), sb)),
    ))


def vsum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Var:
    a = as_var(a)
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), ((a, grad),))


def mean(a: ArrayLike, axis: Optional[int] = None) -> Var:
    a = as_var(a)
    count = a.value.size if axis is None else a.shape[axis]
    return vsum(a, axis=axis) * (1.0 / count)


def getitem(a: ArrayLike, index) -> Var:
    a = as_var(a)
    shape = a.shape

    def grad(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return _node(a.value[index], ((a, grad),))


def concat(parts: Sequence[ArrayLike], axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def make_grad(k):
        def grad(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(bounds[k], bounds[k + 1])
            return g[tuple(index)]
        return grad

    value = np.concatenate([p.value for p in parts], axis=axis)
    return _node(value, tuple((p, make_grad(k)) for k, p in enumerate(parts)))


def broadcast_to(a: ArrayLike, shape: Tuple[int, ...]) -> Var:
    a = as_var(a)
    src = a.shape
    return _node(np.broadcast_to(a.value, shape), ((a, lambda g: _unbroadcast(g, src)),))


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Var:
    a = as_var(a)
    src = a.shape
    return _node(a.value.reshape(shape), ((a, lambda g: g.reshape(src)),))


def transpose(a: ArrayLike) -> Var:
    a = as_var(a)
    return _node(a.value.T, ((a, lambda g: g.T),))


def square(a: ArrayLike) -> Var:
    return mul(a, a)


def relu(a: ArrayLike) -> Var:
    a = as_var(a)
    return where(a.value > 0.0, a, 0.0)


def elu(a: ArrayLike) -> Var:
    # exp only sees the non-positive branch, so large inputs cannot overflow
    a = as_var(a)
    positive = a.value > 0.0
    return where(positive, a, exp(where(positive, 0.0, a)) - 1.0)


def elu_derivative(a: ArrayLike) -> Var:
    a = as_var(a)
    positive = a.value > 0.0
    return where(positive, 1.0, exp(where(positive, 0.0, a)))


def backprop_scalar(tape: GradTape, output: Var) -> Dict[str, np.ndarray]:
    """
    Exact reverse-mode gradients of a scalar result.

    Args:
        tape: Tape that recorded the computation of ``output``
        output: Scalar Var

    Returns:
        dict: Gradient for every watched leaf, keyed by its watch name
    """
    if tape.consumed:
        raise RuntimeError("GradTape already consumed")
    if output.value.size != 1:
        raise ValueError(f"backprop_scalar needs a scalar output, got shape {output.shape}")

    tape.consumed = True
    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)

    if output.tape is tape:
        grads[output.index] = np.ones_like(output.value)
        for node in reversed(tape.nodes[:output.index + 1]):
            g = grads[node.index]
            if g is None:
                continue
            for parent, vjp in node.parents:
                contribution = vjp(g)
                current = grads[parent.index]
                grads[parent.index] = contribution if current is None else current + contribution
    else:
        logger.debug("Output does not depend on any watched value; gradients are zero")

    result = {}
    for name, leaf in tape.watched.items():
        g = grads[leaf.index]
        result[name] = np.zeros_like(leaf.value) if g is None else np.array(g, dtype=np.float64)

    for node in tape.nodes:
        node.parents = ()
    return result
