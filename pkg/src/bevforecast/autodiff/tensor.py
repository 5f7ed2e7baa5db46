from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

_ids = itertools.count()
_local = threading.local()


def _is_recording() -> bool:
    return getattr(_local, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops on this thread without recording edges."""
    prev = _is_recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


class Tensor:
    """A numpy array that records how it was computed.

    Nodes get increasing ids at creation, so every parent has a smaller id
    than its children; sorting reachable nodes by descending id is a valid
    reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "id", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse pass from this node; gradients accumulate into ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        nodes = []
        seen = {self.id}
        stack = [self]
        while stack:
            node = stack.pop()
            nodes.append(node)
            for p in node.parents:
                if p.requires_grad and p.id not in seen:
                    seen.add(p.id)
                    stack.append(p)
        nodes.sort(key=lambda n: n.id, reverse=True)
        self.accumulate(grad)
        for node in nodes:
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
                if node.parents:
                    # interior grads are not needed after propagation
                    node.grad = None if node is not self else node.grad

    # operator sugar, defined in ops
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub

        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub

        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import mul

        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def make_node(data, parents, backward_fn) -> Tensor:
    """Wrap an op result; record the edge only if some parent needs a grad."""
    out = Tensor(data)
    if not _is_recording():
        return out
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out.parents = live
        out.backward_fn = backward_fn
    return out
