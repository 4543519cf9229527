"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every backward rule is itself written with :class:`Tensor` operations, so a
gradient computed with ``create_graph=True`` can be differentiated again.
The deep backward schemes rely on this to train through input gradients.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus the information needed to backpropagate into it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def mT(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + k for k, n in enumerate(shape) if n == 1 and g.shape[lead + k] != 1
    )
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return reshape(g, shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                            _unbroadcast(g, sb) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                            _unbroadcast(neg(g), sb) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), sa) if a.requires_grad else None,
                            _unbroadcast(mul(g, a), sb) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    # the mask is a constant: the second derivative of relu is zero a.e.
    return _node(a.data * mask, (a,), lambda g: (mul(g, mask),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.tanh(a.data), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def identity(a) -> Tensor:
    return as_tensor(a)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** exponent, (a,),
                 lambda g: (mul(g, mul(power(a, exponent - 1.0), exponent)),))


def detach(a) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kd_shape = (1,) * len(shape)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        kd_shape = tuple(1 if k in axes else n for k, n in enumerate(shape))
    return _node(data, (a,), lambda g: (broadcast_to(reshape(g, kd_shape), shape),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (swap_last(g),))


def take(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    shape = a.shape
    return _node(a.data[index], (a,), lambda g: (_scatter(g, index, shape),))


def _scatter(g: Tensor, index, shape) -> Tensor:
    out = np.zeros(shape)
    out[index] = g.data
    return _node(out, (g,), lambda h: (take(h, index),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    nd = parts[0].ndim
    ax = axis % nd

    def backward(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = tuple(slice(None) if k != ax else slice(int(lo), int(hi)) for k in range(nd))
            grads.append(take(g, idx))
        return tuple(grads)

    return _node(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (_unbroadcast(matmul(g, swap_last(b)), sa) if a.requires_grad else None,
                   _unbroadcast(matmul(swap_last(a), g), sb) if b.requires_grad else None),
    )


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "linear": identity,
}


# ---------------------------------------------------------------- driver

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``sum(grad_output * output)`` with respect to ``inputs``.

    Inputs the output does not depend on receive zero gradients. With
    ``create_graph`` the returned tensors carry a graph of their own.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad_output is required for non-scalar outputs")
        seed = Tensor(np.ones(output.shape))
    else:
        seed = as_tensor(grad_output)
        if seed.shape != output.shape:
            raise ValueError(f"grad_output shape {seed.shape} != output shape {output.shape}")

    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = seed
        with _grad_mode(create_graph):
            for node in reversed(_topo_order(output)):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else add(prev, pg)
    return [grads.get(id(x), Tensor(np.zeros(x.shape))) for x in inputs]
