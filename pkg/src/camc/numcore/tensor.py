"""Dense float32 tensors with reverse-mode automatic differentiation.

The graph is built dynamically: each operation records its parents and a
closure that scatters the output gradient back to them.  ``backward`` walks
the recorded graph once, in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


_GRAD_ENABLED = True
_DTYPE = np.float32


def default_dtype():
    return _DTYPE


class precision:
    """Context manager switching the engine dtype (float64 for FD oracles)."""

    def __init__(self, dtype):
        self._dtype = np.dtype(dtype).type

    def __enter__(self):
        global _DTYPE
        self._prev = _DTYPE
        _DTYPE = self._dtype
        return self

    def __exit__(self, *exc):
        global _DTYPE
        _DTYPE = self._prev
        return False


class no_grad:
    """Context manager disabling graph recording (inference fast path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # Convenience arithmetic (tests and small compositions).
    def __add__(self, other):
        from . import functional as F
        return F.add(self, _lift(other))

    def __sub__(self, other):
        from . import functional as F
        return F.add(self, F.scale(_lift(other), -1.0))

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, _lift(other))

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, _lift(other))

    def __getitem__(self, idx):
        from . import functional as F
        return F.slice_(self, idx)

    def sum(self):
        from . import functional as F
        return F.sum_all(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward_fn, op: str) -> Tensor:
    """Create an op output, recording the edge only when gradients may flow."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = unbroadcast(g, t.data.shape)
    if t.grad is None:
        # Own copy: backward closures may hand out views of reused buffers.
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _toposort(root: Tensor):
    order, visited = [], set()
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


def backward(root: Tensor, seed_grad=None):
    """Propagate gradients from ``root`` into every reachable parameter.

    ``seed_grad`` defaults to 1 for a scalar root; pass an explicit array to
    start the sweep from an intermediate node (used by the split-training
    noisy-gradient path).
    """
    if root._done:
        raise RuntimeError("backward already ran for this node; rerun the forward pass")
    if seed_grad is None:
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        seed_grad = np.ones_like(root.data)
    else:
        seed_grad = np.asarray(seed_grad, dtype=root.data.dtype)
        if seed_grad.shape != root.data.shape:
            raise ShapeError(
                f"seed gradient shape {seed_grad.shape} does not match node shape {root.data.shape}"
            )
    if not root.requires_grad:
        return
    order = _toposort(root)
    root.grad = seed_grad.astype(root.data.dtype).copy()
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    root._done = True
