"""Reverse-mode differentiation over numpy arrays.

Every tensor produced by an operation remembers its parents and a closure
mapping the output gradient to parent gradients. Node ids are handed out in
creation order, and an output is always created after its inputs, so sorting
reachable nodes by descending id is a valid reverse-topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

_ids = itertools.count()
_mode = threading.local()


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (per thread)."""
    prev = getattr(_mode, "enabled", True)
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


class GraphError(RuntimeError):
    """Misuse of the computation record (non-scalar loss, reused graph, ...)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id",
                 "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._op == "leaf"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; the ops module does the work
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr, op, where):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {where} of '{op}'")


def make_node(data, parents, backward, op: str) -> Tensor:
    """Wrap an op result, recording ``backward`` if any parent needs a gradient.

    ``backward(grad_out)`` must return one gradient (or None) per parent.
    """
    _check_finite(data, op, "forward output")
    out = Tensor(data)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _reachable(root: Tensor):
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t.node_id, reverse=True)


def backward(loss: Tensor, retain_intermediate: bool = False):
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Leaf gradients accumulate across calls; intermediates are released
    afterwards, so the same graph cannot be swept twice.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires a gradient")

    order = _reachable(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        if retain_intermediate:
            node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, node._op, "backward gradient")
            if pg.shape != parent.data.shape:
                raise GraphError(
                    f"'{node._op}' produced gradient of shape {pg.shape} "
                    f"for input of shape {parent.data.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
