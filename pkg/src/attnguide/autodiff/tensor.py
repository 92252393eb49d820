"""Tensor type and the reverse-mode tape.

A ``Tensor`` wraps a numpy array. Every differentiable operation whose inputs
include a gradient-requiring tensor attaches a :class:`Node` to its output;
``backward`` collects the reachable nodes into a :class:`Tape` (a topologically
ordered list) and replays it in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError

_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    """Set the element precision used when wrapping non-float data (per thread)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable node recording inside the block."""
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Node:
    """One recorded operation: inputs plus a rule mapping the output gradient to input gradients."""

    __slots__ = ("name", "inputs", "backward_fn")

    def __init__(self, name: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.name = name
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.name})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    # keep numpy from hijacking binary operators with arrays on the left
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, _node: Optional[Node] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.floating)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = _node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def make_result(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording a node only if some input needs gradients."""
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, _node=Node(name, inputs, backward_fn))
    return Tensor(data)


class Tape:
    """Topologically ordered list of the nodes reachable from a loss."""

    def __init__(self, nodes: list[Node], leaves: list[Tensor]):
        self.nodes = nodes
        self.leaves = leaves

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Node] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        seen_leaf: set[int] = set()
        if out.node is None:
            if out.requires_grad:
                leaves.append(out)
            return cls(order, leaves)
        # iterative post-order DFS; inputs are visited in argument order so the
        # resulting order is deterministic for a given graph
        stack = [(out.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if not inp.requires_grad:
                    continue
                if inp.node is None:
                    if id(inp) not in seen_leaf:
                        seen_leaf.add(id(inp))
                        leaves.append(inp)
                elif id(inp.node) not in seen:
                    stack.append((inp.node, False))
        return cls(order, leaves)

    def replay(self, out: Tensor, seed_grad: np.ndarray) -> None:
        """Propagate ``seed_grad`` from ``out`` back to every leaf, accumulating into ``.grad``."""
        if out.node is None:
            _accumulate(out, seed_grad)
            return
        grads: dict[int, np.ndarray] = {id(out.node): seed_grad}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    key, store = id(inp), leaf_grads
                else:
                    key, store = id(inp.node), grads
                prev = store.get(key)
                store[key] = gi if prev is None else prev + gi
        for leaf in self.leaves:
            g = leaf_grads.get(id(leaf))
            if g is not None:
                _accumulate(leaf, g)


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every gradient-requiring leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so callers reusing
    leaves across passes should reset them first.
    """
    if not isinstance(loss, Tensor):
        raise ContractError(f"backward expects a Tensor, got {type(loss).__name__}")
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None and not loss.requires_grad:
        raise ContractError("loss is detached from the tape (no gradient-requiring inputs)")
    tape = Tape.from_output(loss)
    tape.replay(loss, np.ones((), dtype=loss.dtype))
    return tape
