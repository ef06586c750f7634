"""Dense float64 tensors with reverse-mode automatic differentiation.

The package keeps a channels-first layout everywhere: a volume is
``(C, D, H, W)`` and a batched volume ``(N, C, D, H, W)``. All data is
contiguous float64 in C order (last axis fastest). Every operation checks
its output for NaN/Inf and raises ``FloatingPointError`` on failure.

The tape is per thread and per training step: it records operations in
creation order (inputs always precede their consumers), ``backward`` walks
it once in reverse and then clears it.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels

_local = threading.local()


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.ops: list[_OpRecord] = []

    def __len__(self):
        return len(self.ops)


class _OpRecord:
    __slots__ = ("name", "out", "inputs", "backward")

    def __init__(self, name, out, inputs, backward):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.backward = backward


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


def _ensure_finite(arr: np.ndarray, name: str) -> None:
    # A single fused reduction is much cheaper than isfinite().all(); a
    # non-finite element always poisons the sum at the magnitudes this
    # package works with.
    if arr.size and not np.isfinite(arr.sum()):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise FloatingPointError(f"{name}: {bad} non-finite value(s) in output of shape {arr.shape}")


class Tensor:
    """Contiguous float64 array, optionally tracked for differentiation.

    A tensor is immutable once created except for its ``grad`` buffer,
    which is written only during a backward pass (and by the optimizer
    clearing it). ``requires_grad`` marks trainable leaves; tensors
    produced by operations on tracked inputs are tracked automatically.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _ensure_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = False
        return t

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def tracked(self) -> bool:
        return self.requires_grad or self._node

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __radd__(self, other):
        return shift(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __mul__(self, other):
        return hadamard(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)


def make_op(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Create an op output and register its backward rule on the tape.

    ``backward`` receives the output gradient and returns one gradient
    array (or None) per input, in order. Returned arrays may alias the
    incoming gradient; the engine copies where adoption would alias.
    """
    _ensure_finite(out_data, name)
    out = Tensor._wrap(out_data)
    if _grad_enabled() and any(t.tracked() for t in inputs):
        out._node = True
        out.requires_grad = True
        current_tape().ops.append(_OpRecord(name, out, tuple(inputs), backward))
    return out


def backward(scalar: Tensor) -> None:
    """Propagate d(scalar)/d(leaf) into every tracked leaf's grad buffer.

    The scalar must have exactly one element and the tape must be
    non-empty. Gradients accumulate (+=) into existing buffers; the tape
    is cleared afterwards.
    """
    if scalar.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {scalar.shape}")
    tape = current_tape()
    if not tape.ops:
        raise ValueError("backward on an empty tape")
    scalar.grad = np.ones_like(scalar.data)
    try:
        for rec in reversed(tape.ops):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            adopted: list[np.ndarray] = []
            for t, gi in zip(rec.inputs, grads):
                if gi is None or not t.tracked():
                    continue
                if t.grad is None:
                    if gi is g or any(gi is a for a in adopted):
                        gi = gi.copy()
                    t.grad = gi
                    adopted.append(gi)
                else:
                    t.grad += gi
            rec.out.grad = None
    finally:
        tape.ops.clear()


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def detach(x: Tensor) -> Tensor:
    """A view of x's data severed from the tape."""
    return Tensor._wrap(x.data)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; backward distributes the gradient to both sides."""
    _check_same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return make_op("hadamard", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return g / bd, -g * ad / (bd * bd)

    return make_op("div", out, (a, b), bwd)


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return make_op("scale", x.data * k, (x,), lambda g: (g * k,))


def shift(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return make_op("shift", x.data + k, (x,), lambda g: (g,))


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements (0-d tensor). numpy's deterministic pairwise
    reduction is the fixed summation order used throughout."""
    shape = x.shape
    return make_op("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def tmean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_op("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out = x.data.sum(axis=axis)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_op("sum_axis", out, (x,), bwd)


def clamped_log(x: Tensor, eps: float = 1e-12) -> Tensor:
    """log(max(x, eps)); the clamp has zero derivative below eps."""
    clamped = np.maximum(x.data, eps)
    mask = x.data >= eps

    def bwd(g):
        return (g * mask / clamped,)

    return make_op("clamped_log", np.log(clamped), (x,), bwd)


# ---------------------------------------------------------------------------
# activations

def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_op("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis (axis 0 of CDHW, axis 1 of NCDHW)."""
    axis = 1 if x.ndim == 5 else 0
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_op("softmax_channels", out, (x,), bwd)


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softmax_channels": softmax_channels,
}


def activation(x: Tensor, kind: str) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    if kind == "softmax_channels" and x.ndim < 2:
        raise ValueError("softmax_channels needs a channel axis")
    return _ACTIVATIONS[kind](x)


# ---------------------------------------------------------------------------
# shape ops

def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ValueError("concat of no tensors")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op("concat", out, tuple(parts), bwd)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving order."""
    axis = 1 if parts and parts[0].ndim == 5 else 0
    return concat(parts, axis)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return make_op("narrow", np.ascontiguousarray(x.data[idx]), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# convolution / pooling / upsampling

def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """3-D cross-correlation over a CDHW (or NCDHW) input.

    weight is (OC, IC, k, k, k) with odd k; output spatial dims are
    floor((S + 2*pad - k) / stride) + 1. Reduction order per output voxel
    is the fixed serial scan over (channel, kd, kh, kw).
    """
    if x.ndim == 5:
        if x.shape[0] != 1:
            raise ValueError(f"conv3d: only batch size 1 is supported, got {x.shape}")
        squeezed = reshape(x, x.shape[1:])
        out = conv3d(squeezed, weight, bias, stride=stride, pad=pad)
        return reshape(out, (1,) + out.shape)
    if x.ndim != 4 or weight.ndim != 5:
        raise ValueError(f"conv3d: expected CDHW input and OIkkk weight, got {x.shape} and {weight.shape}")
    oc, ic, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"conv3d: kernel must be cubic with odd size, got {weight.shape}")
    if x.shape[0] != ic:
        raise ValueError(f"conv3d: input channels {x.shape} do not match weight {weight.shape}")
    if bias is not None and bias.shape != (oc,):
        raise ValueError(f"conv3d: bias shape {bias.shape} does not match {oc} output channels")
    out_sp = tuple((s + 2 * pad - k) // stride + 1 for s in x.shape[1:])
    if any(s < 1 for s in out_sp):
        raise ValueError(f"conv3d: input {x.shape} too small for k={k}, pad={pad}, stride={stride}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    bias_data = bias.data if bias is not None else np.zeros(oc)
    out = np.empty((oc,) + out_sp)
    if stride == 1:
        _kernels.conv3d_fwd(xp, weight.data, bias_data, out)
    else:
        _kernels.conv3d_fwd_strided(xp, weight.data, bias_data, stride, out)

    w_data = weight.data
    x_shape, xp_shape = x.shape, xp.shape
    need_x = x.tracked()
    need_w = weight.tracked()

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if need_w:
            gw = np.empty_like(w_data)
            _kernels.conv3d_grad_w(np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad))), g, gw)
        if need_x:
            if stride == 1:
                # grad wrt input = correlation of g with the transposed,
                # spatially flipped kernel at full padding, cropped back.
                wt = np.ascontiguousarray(w_data.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
                gpad = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (k - 1, k - 1)))
                gxp = np.empty(xp_shape)
                _kernels.conv3d_fwd(gpad, wt, np.zeros(ic), gxp)
            else:
                gxp = np.zeros(xp_shape)
                _kernels.conv3d_grad_x_strided(w_data, g, stride, gxp)
            sl = slice(pad, None) if pad else slice(None)
            gx = np.ascontiguousarray(
                gxp[:, pad : pad + x_shape[1], pad : pad + x_shape[2], pad : pad + x_shape[3]]
            )
        if bias is not None and bias.tracked():
            gb = g.sum(axis=(1, 2, 3))
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    if bias is None:
        return make_op("conv3d", out, inputs, lambda g: bwd(g)[:2])
    return make_op("conv3d", out, inputs, bwd)


def maxpool3d(x: Tensor, k: int = 2) -> Tensor:
    """Max pooling with cubic window and stride k; dims must divide by k."""
    if x.ndim != 4:
        raise ValueError(f"maxpool3d: expected CDHW input, got {x.shape}")
    c, d, h, w = x.shape
    if d % k or h % k or w % k:
        raise ValueError(f"maxpool3d: spatial dims {x.shape[1:]} not divisible by {k}")
    dd, hh, ww = d // k, h // k, w // k
    windows = (
        x.data.reshape(c, dd, k, hh, k, ww, k)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, dd, hh, ww, k * k * k)
    )
    idx = windows.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bwd(g):
        gw = np.zeros((c, dd, hh, ww, k * k * k))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(c, dd, hh, ww, k, k, k)
            .transpose(0, 1, 4, 2, 5, 3, 6)
            .reshape(shape)
        )
        return (np.ascontiguousarray(gx),)

    return make_op("maxpool3d", np.ascontiguousarray(out), (x,), bwd)


def _upsample2_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis by linear interpolation at half-voxel offsets.

    Output sample j sits at source coordinate (j + 0.5)/2 - 0.5, clamped
    to the border, so constants are preserved exactly.
    """
    a = np.moveaxis(arr, axis, 0)
    n = a.shape[0]
    out = np.empty((2 * n,) + a.shape[1:])
    lo = a[np.maximum(np.arange(n) - 1, 0)]
    hi = a[np.minimum(np.arange(n) + 1, n - 1)]
    out[0::2] = 0.75 * a + 0.25 * lo
    out[1::2] = 0.75 * a + 0.25 * hi
    return np.moveaxis(out, 0, axis)


def _upsample2_axis_t(g: np.ndarray, axis: int) -> np.ndarray:
    # Transpose of _upsample2_axis.
    ga = np.moveaxis(g, axis, 0)
    n = ga.shape[0] // 2
    out = 0.75 * (ga[0::2] + ga[1::2])
    # lo contributions: out[2j] took 0.25 from a[j-1] (clamped to a[0])
    out[: n - 1] += 0.25 * ga[2::2]
    out[0] += 0.25 * ga[0]
    # hi contributions: out[2j+1] took 0.25 from a[j+1] (clamped to a[n-1])
    out[1:] += 0.25 * ga[1:-1:2]
    out[n - 1] += 0.25 * ga[-1]
    return np.moveaxis(out, 0, axis)


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Trilinear upsampling of a CDHW tensor. Only factor 2 is supported."""
    if x.ndim != 4:
        raise ValueError(f"upsample_trilinear: expected CDHW input, got {x.shape}")
    if factor != 2:
        raise ValueError("upsample_trilinear: only factor=2 is implemented")
    out = x.data
    for axis in (1, 2, 3):
        out = _upsample2_axis(out, axis)

    def bwd(g):
        for axis in (3, 2, 1):
            g = _upsample2_axis_t(g, axis)
        return (np.ascontiguousarray(g),)

    return make_op("upsample_trilinear", np.ascontiguousarray(out), (x,), bwd)
