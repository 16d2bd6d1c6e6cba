"""Differentiable operations over `Tensor`.

Layout is dense row-major throughout; volumetric tensors are channel-first
(C x D x H x W). Each op is a `Function` subclass plus a small module-level
wrapper that validates shapes and applies it.
"""
import itertools
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tensor.core import Function, Tensor, as_tensor
from utils.errors import ShapeError

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _pair(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# ---------------------------------------------------------------------------
# elementwise


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Scale(Function):
    def forward(self, x, factor=1.0):
        self.factor = factor
        return x * x.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


class Gelu(Function):
    """tanh approximation of GELU."""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class Clamp(Function):
    def forward(self, x, low=None, high=None):
        self.mask = np.ones(x.shape, dtype=bool)
        if low is not None:
            self.mask &= x >= low
        if high is not None:
            self.mask &= x <= high
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


def add(a, b) -> Tensor:
    return Add.apply(*_pair(a, b))


def sub(a, b) -> Tensor:
    return Sub.apply(*_pair(a, b))


def mul(a, b) -> Tensor:
    return Mul.apply(*_pair(a, b))


def div(a, b) -> Tensor:
    return Div.apply(*_pair(a, b))


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def clamp(x: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    return Clamp.apply(x, low=low, high=high)


# ---------------------------------------------------------------------------
# shape plumbing


class Reshape(Function):
    def forward(self, x, shape=()):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(x.ndim)))
        return np.ascontiguousarray(np.transpose(x, self.axes))

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Take(Function):
    def forward(self, x, index=None):
        self.in_shape, self.dtype, self.index = x.shape, x.dtype, index
        return np.ascontiguousarray(x[index])

    def backward(self, grad):
        gx = np.zeros(self.in_shape, dtype=self.dtype)
        np.add.at(gx, self.index, grad)
        return (gx,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return Reshape.apply(x, shape=shape)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes) if axes is not None else None)


def take(x: Tensor, index) -> Tensor:
    return Take.apply(x, index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    return Concat.apply(*tensors, axis=axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m x k and a k x n tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Row-wise affine map: x (n x in) @ weight (in x out) + bias (out)."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=self.axis, keepdims=True),)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for tensor of rank {x.ndim}")
    return axis % x.ndim


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    return Softmax.apply(x, axis=_check_axis(x, axis))


def log_softmax_axis(x: Tensor, axis: int) -> Tensor:
    return LogSoftmax.apply(x, axis=_check_axis(x, axis))


class LayerNorm(Function):
    def forward(self, x, gain, bias, axis=0, eps=LAYER_NORM_EPS):
        self.axis = axis
        bshape = [1] * x.ndim
        bshape[axis] = x.shape[axis]
        self.bshape = tuple(bshape)
        mu = x.mean(axis=axis, keepdims=True)
        var = x.var(axis=axis, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.gain = gain.reshape(self.bshape)
        return self.xhat * self.gain + bias.reshape(self.bshape)

    def backward(self, grad):
        axis, xhat = self.axis, self.xhat
        others = tuple(i for i in range(grad.ndim) if i != axis)
        dgain = (grad * xhat).sum(axis=others)
        dbias = grad.sum(axis=others)
        dxhat = grad * self.gain
        dx = self.inv_std * (
            dxhat
            - dxhat.mean(axis=axis, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return dx, dgain, dbias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = 0, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise along the channel `axis`, then apply per-channel gain and bias."""
    axis = _check_axis(x, axis)
    if gain.shape != (x.shape[axis],) or bias.shape != (x.shape[axis],):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match channel extent {x.shape[axis]}")
    return LayerNorm.apply(x, gain, bias, axis=axis, eps=eps)


# ---------------------------------------------------------------------------
# volumetric ops


def _window_slices(offset: Sequence[int], stride: int, out_extents: Sequence[int]):
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_extents))


class Conv3(Function):
    def forward(self, x, w, stride=1, pad=0):
        self.stride, self.pad = stride, pad
        self.in_shape = x.shape
        k = w.shape[2]
        xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3) if pad else x
        self.xp, self.w = xp, w
        self.out_ext = tuple((n + 2 * pad - k) // stride + 1 for n in x.shape[1:])
        voxels = int(np.prod(self.out_ext))
        out = np.zeros((w.shape[0], voxels), dtype=x.dtype)
        for offset in itertools.product(range(k), repeat=3):
            patch = xp[(slice(None),) + _window_slices(offset, stride, self.out_ext)]
            out += w[(slice(None), slice(None)) + offset] @ patch.reshape(x.shape[0], voxels)
        return out.reshape((w.shape[0],) + self.out_ext)

    def backward(self, grad):
        xp, w, stride = self.xp, self.w, self.stride
        c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
        g = grad.reshape(c_out, -1)
        gw = np.zeros_like(w)
        gxp = np.zeros_like(xp)
        for offset in itertools.product(range(k), repeat=3):
            sl = (slice(None),) + _window_slices(offset, stride, self.out_ext)
            patch = xp[sl].reshape(c_in, -1)
            gw[(slice(None), slice(None)) + offset] = g @ patch.T
            gxp[sl] += (w[(slice(None), slice(None)) + offset].T @ g).reshape((c_in,) + self.out_ext)
        p = self.pad
        gx = gxp[:, p:p + self.in_shape[1], p:p + self.in_shape[2], p:p + self.in_shape[3]] if p else gxp
        return gx, gw


def conv3(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """3D cross-correlation of a c_in x D x H x W volume with c_out x c_in x k x k x k weights."""
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3 expects x rank 4 and w rank 5, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3: weight expects {w.shape[1]} input channels, input has {x.shape[0]}")
    if not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError(f"conv3 needs a cubic kernel, got {w.shape[2:]}")
    k = w.shape[2]
    out = [(n + 2 * pad - k) // stride + 1 for n in x.shape[1:]]
    if min(out) <= 0:
        raise ShapeError(f"conv3: kernel {k} with stride {stride}, pad {pad} does not fit input {x.shape[1:]}")
    return Conv3.apply(x, w, stride=int(stride), pad=int(pad))


class WindowPool(Function):
    def forward(self, x, kind="max", window=2, stride=2):
        self.kind, self.window, self.stride = kind, window, stride
        self.in_shape, self.dtype = x.shape, x.dtype
        view = sliding_window_view(x, (window,) * 3, axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
        self.out_ext = view.shape[1:4]
        flat = view.reshape(view.shape[:4] + (-1,))
        if kind == "max":
            self.argmax = flat.argmax(axis=-1)
            return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]
        return flat.mean(axis=-1)

    def backward(self, grad):
        gx = np.zeros(self.in_shape, dtype=self.dtype)
        w = self.window
        for flat_index, offset in enumerate(itertools.product(range(w), repeat=3)):
            sl = (slice(None),) + _window_slices(offset, self.stride, self.out_ext)
            if self.kind == "max":
                gx[sl] += grad * (self.argmax == flat_index)
            else:
                gx[sl] += grad / (w ** 3)
        return (gx,)


class GlobalPool(Function):
    def forward(self, x, kind="max", axes=(1,)):
        self.kind, self.axes, self.in_shape, self.dtype = kind, axes, x.shape, x.dtype
        keep = [i for i in range(x.ndim) if i not in axes]
        self.perm = keep + list(axes)
        moved = np.transpose(x, self.perm)
        self.moved_shape = moved.shape
        flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
        if kind == "max":
            self.argmax = flat.argmax(axis=-1)
            return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]
        self.count = flat.shape[-1]
        return flat.mean(axis=-1)

    def backward(self, grad):
        n_keep = len(self.perm) - len(self.axes)
        flat_shape = self.moved_shape[:n_keep] + (-1,)
        if self.kind == "max":
            gflat = np.zeros(self.moved_shape, dtype=self.dtype).reshape(flat_shape)
            np.put_along_axis(gflat, self.argmax[..., None], np.asarray(grad)[..., None], axis=-1)
        else:
            gflat = np.broadcast_to(np.asarray(grad)[..., None] / self.count,
                                    self.moved_shape[:n_keep] + (int(np.prod(self.moved_shape[n_keep:])),))
        gmoved = np.ascontiguousarray(gflat).reshape(self.moved_shape)
        return (np.transpose(gmoved, np.argsort(self.perm)),)


def pool(x: Tensor, kind: str = "max", window: Optional[int] = None, stride: Optional[int] = None,
         axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    """Max or average pooling.

    With a `window`, pools cubic windows over the three spatial axes of a
    C x D x H x W volume. Without one, reduces globally: over `axes` if given,
    otherwise every axis after the leading channel axis (axis 0 for 1-D input).
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind: {kind}")
    if window is None:
        if axes is None:
            axes = tuple(range(1, x.ndim)) if x.ndim > 1 else (0,)
        axes = tuple(sorted(a % x.ndim for a in axes))
        return GlobalPool.apply(x, kind=kind, axes=axes)
    stride = stride or window
    if x.ndim != 4:
        raise ShapeError(f"windowed pool expects C x D x H x W input, got {x.shape}")
    if any(window > n for n in x.shape[1:]):
        raise ShapeError(f"pool window {window} larger than input extents {x.shape[1:]}")
    return WindowPool.apply(x, kind=kind, window=int(window), stride=int(stride))


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


class InterpolateNearest(Function):
    def forward(self, x, target=()):
        self.lead = x.ndim - len(target)
        self.in_shape, self.dtype = x.shape, x.dtype
        self.maps = [_nearest_index(x.shape[self.lead + i], t) for i, t in enumerate(target)]
        out = x
        for i, idx in enumerate(self.maps):
            out = np.take(out, idx, axis=self.lead + i)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        g = grad
        for i in reversed(range(len(self.maps))):
            axis = self.lead + i
            moved = np.moveaxis(g, axis, 0)
            acc = np.zeros((self.in_shape[axis],) + moved.shape[1:], dtype=self.dtype)
            np.add.at(acc, self.maps[i], moved)
            g = np.moveaxis(acc, 0, axis)
        return (g,)


def interpolate_nearest(x: Tensor, target_extents: Sequence[int]) -> Tensor:
    """Resize the trailing len(target_extents) axes by nearest-neighbour lookup."""
    target = tuple(int(t) for t in target_extents)
    if any(t <= 0 for t in target):
        raise ShapeError(f"interpolate_nearest: target extents must be positive, got {target}")
    if len(target) > x.ndim:
        raise ShapeError(f"interpolate_nearest: {len(target)} target extents for tensor of rank {x.ndim}")
    if tuple(x.shape[x.ndim - len(target):]) == target:
        return x
    return InterpolateNearest.apply(x, target=target)


def resize_labels(labels: np.ndarray, target_extents: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resize of an integer label volume (no gradient)."""
    out = labels
    for axis, t in enumerate(target_extents):
        out = np.take(out, _nearest_index(labels.shape[axis], int(t)), axis=axis)
    return np.ascontiguousarray(out)


def hard_assign(logits: Tensor, axis: int = 0) -> Tensor:
    """One-hot argmax along `axis` as a constant tensor (no gradient path).

    Ties resolve to the lowest index.
    """
    data = logits.data
    winners = data.argmax(axis=axis)
    onehot = np.zeros_like(data)
    np.put_along_axis(onehot, np.expand_dims(winners, axis), 1.0, axis=axis)
    return Tensor(onehot, requires_grad=False, dtype=data.dtype)
