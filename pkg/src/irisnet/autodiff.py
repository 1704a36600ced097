"""Reverse-mode automatic differentiation over dense n-dimensional tensors.

The graph is implicit: a tensor produced by an operation keeps a tuple of
parent tensors plus a closure that routes its output gradient to them.
``backward`` collects the graph once, in construction order, and replays it
in reverse, so every node is visited exactly once and gradients accumulate
in a fixed deterministic order (bit-exact across runs).

Forward and backward compute in 32-bit floats; ``grad_check`` re-executes
the function under test on 64-bit shadow tensors so the central-difference
oracle stays trustworthy at tolerances around 1e-4. relu'(0) is defined
as 0 throughout.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from .errors import NotScalar, ShapeMismatch

_node_counter = itertools.count(1)
_grad_enabled = True


@contextmanager
def no_grad():
    """Suppress graph construction inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float32 array with an optional gradient buffer and graph link.

    ``data`` is a row-major numpy array. ``grad`` is absent (None) until a
    backward pass populates it. ``node_id`` is an opaque handle assigned
    only to tensors created by operations; leaves made directly carry None.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self._parents = ()
        self._backward_fn = None
        self._op = None

    # -- construction used by every op ------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.node_id = next(_node_counter)
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._op = op
        else:
            out.node_id = None
            out._parents = ()
            out._backward_fn = None
            out._op = None
        return out

    # -- basics ------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of {self.data.size} elements")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def backward(self) -> None:
        backward(self)


def tensor_new(shape, data, requires_grad: bool = False) -> Tensor:
    """Leaf constructor taking an explicit shape and flat row-major data."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeMismatch(f"shape entries must be >= 1, got {shape}")
    data = np.asarray(data, dtype=np.float32).reshape(-1)
    if math.prod(shape) != data.size:
        raise ShapeMismatch(f"shape {shape} expects {math.prod(shape)} elements, got {data.size}")
    return Tensor(data.reshape(shape), requires_grad=requires_grad)


def _as_pair(a, b, op: str):
    """Coerce operands for an elementwise op: equal shapes or scalar broadcast."""
    dtype = a.data.dtype if isinstance(a, Tensor) else b.data.dtype
    if isinstance(a, (int, float, np.floating, np.integer)):
        a = Tensor(np.asarray(a, dtype=dtype))
    if isinstance(b, (int, float, np.floating, np.integer)):
        b = Tensor(np.asarray(b, dtype=dtype))
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeMismatch(f"{op}: unsupported operand types")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are incompatible")
    return a, b


def _reduce_to(g, shape):
    """Sum a gradient down to a scalar operand's shape after broadcast."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape).astype(g.dtype, copy=False)


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return Tensor._from_op(out_data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_pair(a, b, "sub")
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b.shape))

    return Tensor._from_op(out_data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), backward_fn, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeMismatch("matmul expects two tensors")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), backward_fn, "matmul")


def tensor_sum(a: Tensor) -> Tensor:
    out_data = np.sum(a.data).reshape(1)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g.reshape(-1)[0]))

    return Tensor._from_op(out_data, (a,), backward_fn, "sum")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.where(mask, a.data, a.data.dtype.type(0))

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return Tensor._from_op(out_data, (a,), backward_fn, "relu")


def _topo_order(root: Tensor):
    """Reverse-topological order via an iterative post-order walk."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients from multiple uses of the same tensor accumulate by summation.
    Raises NotScalar unless the loss has exactly one element.
    """
    if loss.size != 1:
        raise NotScalar(f"backward expects a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def grad_check(f, x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Both evaluations run on a 64-bit shadow copy of ``x`` so the oracle is
    not limited by float32 rounding. The error at each coordinate is
    |g_a - g_n| / max(1e-8, |g_a| + |g_n|); the max over coordinates is
    returned. Near kinks (relu at 0) the estimate is unreliable; keep
    inputs away from them.
    """
    x64 = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True, dtype=np.float64)
    out = f(x64)
    if out.size != 1:
        raise NotScalar("grad_check expects a scalar-valued function")
    out.backward()
    analytic = x64.grad.copy() if x64.grad is not None else np.zeros_like(x64.data)

    numeric = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(x64).item()
            flat[i] = orig - h
            f_minus = f(x64).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
