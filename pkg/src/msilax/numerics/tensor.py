"""Dense tensor with reverse-mode differentiation.

Every op that has at least one input with ``requires_grad`` records a node
carrying a monotonically increasing sequence number.  ``backward`` gathers
the nodes reachable from the loss and replays them in descending sequence
order, i.e. exactly the reverse of recording order, then severs the graph
so the tape is freed.  Tensors with ``requires_grad=False`` never receive
gradient.
"""
import itertools
import threading
from contextlib import contextmanager

import numpy as np

from msilax.errors import UsageError

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = -1
        self.op = None

    # -- construction helpers
    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
            out._seq = next(_seq)
        else:
            out._parents = ()
            out._backward = None
            out._seq = -1
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar; implementations live in ops
    def __add__(self, other):
        from msilax.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from msilax.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from msilax.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from msilax.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from msilax.numerics import ops
        return ops.div(self, other)

    def __neg__(self):
        from msilax.numerics import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from msilax.numerics import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from msilax.numerics import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from msilax.numerics import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from msilax.numerics import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self, trace=None):
        backward(self, trace=trace)


def as_tensor(x, like=None):
    """Wrap constants; tensors pass through untouched."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def backward(loss, trace=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``trace``, if given, receives the op name of each node in visit order.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if trace is not None:
            trace.append(node.op)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                # leaf
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += pg
            else:
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # drop the tape
    for node in nodes:
        node._parents = ()
        node._backward = None
