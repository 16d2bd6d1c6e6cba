"""Dense tensor with a reverse-mode autodiff tape.

Every differentiable operation is a `Function` subclass. Applying one records a
node on a thread-local tape; `backward` walks the tape once in reverse order and
accumulates gradients into leaf tensors, then clears the tape.
"""
import logging
import os
import threading
from contextlib import contextmanager
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_state = threading.local()


def _local():
    if not hasattr(_state, "tape"):
        _state.tape = Graph()
        _state.recording = True
        _state.dtype = np.float32
        _state.debug = os.getenv("CIMT_DEBUG", "0") not in ("", "0", "false")
    return _state


def default_dtype():
    return _local().dtype


@contextmanager
def precision(name: str):
    """Switch the dtype of newly created tensors ("float32" or "float64")."""
    if name not in ("float32", "float64"):
        raise ValueError(f"Unsupported precision: {name}")
    st = _local()
    previous = st.dtype
    st.dtype = np.dtype(name).type
    try:
        yield
    finally:
        st.dtype = previous


@contextmanager
def no_grad():
    st = _local()
    previous = st.recording
    st.recording = False
    try:
        yield
    finally:
        st.recording = previous


def set_debug(enabled: bool):
    """Turn NaN/Inf guard assertions on or off for this thread."""
    _local().debug = bool(enabled)


def debug_enabled() -> bool:
    return _local().debug


class Graph:
    """Ordered record of applied functions. Inputs always precede their consumers."""

    def __init__(self):
        self.nodes: List["Function"] = []

    def record(self, fn: "Function"):
        self.nodes.append(fn)

    def clear(self):
        for fn in self.nodes:
            fn.inputs = ()
            fn.output = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


def current_graph() -> Graph:
    return _local().tape


class Function:
    """Base class for differentiable operations.

    `forward` receives raw numpy arrays, `backward` receives the upstream
    gradient array and returns one array (or None) per input tensor.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs: Tuple["Tensor", ...] = inputs
        self.output: Optional["Tensor"] = None

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        if debug_enabled():
            _check_finite(cls.__name__, inputs, out_data)
        requires_grad = _local().recording and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)
        if requires_grad:
            out.node = fn
            fn.output = out
            current_graph().record(fn)
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so `grad` matches `shape`."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


def _check_finite(name, inputs, out_data):
    if np.all(np.isfinite(out_data)):
        return
    if all(np.all(np.isfinite(t.data)) for t in inputs):
        raise NumericalError(f"{name} produced non-finite values from finite inputs")


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        dtype = dtype or default_dtype()
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Function] = None

    # construction helpers
    @classmethod
    def zeros(cls, shape, requires_grad=False):
        return cls(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False):
        return cls(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"can only convert a tensor of size 1 to a Python scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator overloads route through tensor.ops to keep a single definition per op
    def __add__(self, other):
        from tensor import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from tensor import ops
        return ops.add(as_tensor(other, self), self)

    def __sub__(self, other):
        from tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from tensor import ops
        return ops.sub(as_tensor(other, self), self)

    def __mul__(self, other):
        from tensor import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from tensor import ops
        return ops.mul(as_tensor(other, self), self)

    def __truediv__(self, other):
        from tensor import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from tensor import ops
        return ops.div(as_tensor(other, self), self)

    def __neg__(self):
        from tensor import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from tensor import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from tensor import ops
        return ops.take(self, index)

    def sum(self, axis=None, keepdims=False):
        from tensor import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from tensor import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from tensor import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from tensor import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, requires_grad=False, dtype=dtype)


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """Populate `.grad` of every requires_grad leaf reachable from a scalar loss.

    Leaf gradients accumulate across calls (so a batch can be summed sample by
    sample); the tape is cleared afterwards. Returns the leaf gradient store
    keyed by `id(tensor)`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = current_graph()
    if not loss.requires_grad:
        tape.clear()
        return {}
    if loss.is_leaf:
        ones = np.ones_like(loss.data)
        loss.grad = ones if loss.grad is None else loss.grad + ones
        tape.clear()
        return {id(loss): loss.grad}

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for fn in reversed(tape.nodes):
        out = fn.output
        if out is None:
            continue
        upstream = grads.pop(id(out), None)
        if upstream is None:
            continue
        in_grads = fn.backward(upstream)
        for tensor, g in zip(fn.inputs, in_grads):
            if g is None or not tensor.requires_grad:
                continue
            g = Function.unbroadcast(np.asarray(g), tensor.shape)
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if tensor.is_leaf:
                leaves[key] = tensor
    tape.clear()

    store = {}
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        store[key] = leaf.grad
    return store
