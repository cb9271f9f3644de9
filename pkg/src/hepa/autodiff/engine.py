"""Tensor type and the reverse-mode tape.

Every differentiable op appends one node to a thread-local tape when any of its
inputs requires a gradient. ``backward`` replays the tape in reverse recording
order, which is a valid topological order because a node can only consume
tensors that were produced before it.
"""
import threading

import numpy as np

from ..errors import ContractError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = []
    return tape


def grad_enabled():
    return getattr(_local, "enabled", True)


class no_grad:
    """Context manager: ops inside record nothing."""

    def __enter__(self):
        self._prev = grad_enabled()
        _local.enabled = False
        return self

    def __exit__(self, *exc):
        _local.enabled = self._prev
        return False


def _release(tape):
    # break the out <-> node cycles so activations are freed without waiting for gc
    for node in tape:
        node.out._node = None
        node.out = node.inputs = node.backward = None
    tape.clear()


def clear_tape():
    _release(_tape())


def tape_length():
    return len(_tape())


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense array with an optional gradient.

    ``data`` is a numpy array (float32 unless created otherwise); ``grad`` is
    allocated on first accumulation and always has ``data``'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    # -- operator sugar (implementations live in ops) ------------------
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __rtruediv__(self, other):
        return _ops.div(other, self)

    def __neg__(self):
        return _ops.neg(self)

    def __pow__(self, exponent):
        return _ops.power(self, exponent)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def __getitem__(self, index):
        return _ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops.transpose(self, axes or None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


def record(data, inputs, backward_fn):
    """Wrap ``data`` as the output of an op and put the op on the tape.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    if isinstance(data, np.generic):      # 0-d results of numpy arithmetic are scalars
        data = np.asarray(data)
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(out, inputs, backward_fn)
        _tape().append(out._node)
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every participating leaf.

    The tape is cleared afterwards, so each forward pass supports exactly one
    backward pass.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss is not on the tape (no input requires grad)")
    tape = _tape()
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(tape):
            out = node.out
            g = out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.data.shape:
                    gi = np.broadcast_to(gi, inp.data.shape)
                if inp.grad is None:
                    # leaves get an owned copy; intermediates may alias (never mutated)
                    inp.grad = np.array(gi, dtype=inp.data.dtype) if inp._node is None else gi
                else:
                    inp.grad = inp.grad + gi
            if out is not loss:
                out.grad = None
    finally:
        _release(tape)


from . import ops as _ops  # noqa: E402  (ops imports Tensor from here)
