"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when any input requires a
gradient, records the parents and a backward closure.  Graphs are built
eagerly, so the decoder loop is simply unrolled by running it.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic is delegated to the functional ops module
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf
        that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    """Nodes reachable from ``root`` that require grad, outputs first."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward) -> Tensor:
    """Create an op output; the graph is recorded only when needed."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


# --- kink proximity tracking -------------------------------------------------
# Non-smooth ops (relu, leaky_relu, maxpool, clip, maximum) report how close
# their inputs came to a non-differentiable point, plus the discrete branch
# they took.  Gradient checks use the margin to reject inputs that sit near a
# kink, and the branch record to confirm no finite-difference step crossed one.

_kink_trackers: list = []


class KinkTracker:
    """``margin`` covers activation inputs and clip/floor thresholds;
    ``pool_margin`` is the smallest gap between a pooling window's maximum
    and its runner-up.  ``branches`` fingerprints every discrete choice."""

    def __init__(self):
        self.margin = np.inf
        self.pool_margin = np.inf
        self.branches = []

    def update(self, margin, kind="activation", branch=None):
        if kind == "pool":
            self.pool_margin = min(self.pool_margin, float(margin))
        else:
            self.margin = min(self.margin, float(margin))
        if branch is not None:
            self.branches.append(hash(np.ascontiguousarray(branch).tobytes()))


@contextmanager
def track_kinks():
    tracker = KinkTracker()
    _kink_trackers.append(tracker)
    try:
        yield tracker
    finally:
        _kink_trackers.remove(tracker)


def report_kink(values_fn, kind="activation", branch=None):
    if _kink_trackers:
        margin = values_fn()
        for tracker in _kink_trackers:
            tracker.update(margin, kind, branch)
