"""Dense tensor type with reverse-mode automatic differentiation.

Everything downstream (convolutions, spectral transforms, blocks, losses)
is built from the operations in this module. Values are numpy arrays;
float64 is the default so that finite-difference verification has enough
headroom, float32 is available as an opt-in speed mode.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_MAGIC = b"PKTN"
_FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_TAG_DTYPES = {0: np.dtype(np.float64), 1: np.dtype(np.float32)}


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent for an operation."""


class CorruptTensorError(ValueError):
    """Raised by validate() when a tensor holds NaN or Inf."""


# ---------------------------------------------------------------------------
# instrumentation: allocation tracking (memory benchmark) and MAC counting
# ---------------------------------------------------------------------------

class AllocationRecorder:
    """Accumulates bytes of tensor storage allocated while active."""

    def __init__(self):
        self.bytes_allocated = 0

    def add(self, nbytes):
        self.bytes_allocated += nbytes


class MacRecorder:
    """Accumulates multiply-accumulate counts reported by conv ops."""

    def __init__(self):
        self.macs = 0

    def add(self, count):
        self.macs += count


_alloc_stack: list[AllocationRecorder] = []
_mac_stack: list[MacRecorder] = []
_grad_enabled = True


@contextmanager
def track_allocations():
    rec = AllocationRecorder()
    _alloc_stack.append(rec)
    try:
        yield rec
    finally:
        _alloc_stack.remove(rec)


@contextmanager
def count_macs():
    rec = MacRecorder()
    _mac_stack.append(rec)
    try:
        yield rec
    finally:
        _mac_stack.remove(rec)


def record_macs(count):
    for rec in _mac_stack:
        rec.add(int(count))


@contextmanager
def no_grad():
    """Disable tape recording (inference / benchmarks)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        for rec in _alloc_stack:
            rec.add(arr.nbytes)

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def validate(self):
        """Check every stored value is finite; raise with the first bad index."""
        bad = ~np.isfinite(self.data)
        if bad.any():
            idx = tuple(
                int(i)
                for i in np.unravel_index(int(np.argmax(bad)), self.data.shape)
            )
            raise CorruptTensorError(
                f"non-finite value {self.data[idx]!r} at index {idx} "
                f"(total {int(bad.sum())} corrupt entries)"
            )
        return self

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # -- autograd -----------------------------------------------------------

    def backward(self):
        """Populate .grad on every reachable requires_grad tensor.

        Only a scalar (0-d) loss may seed the backward pass. Repeated calls
        accumulate into existing gradient buffers.
        """
        if self.data.ndim != 0:
            raise ShapeError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo = _toposort(self)
        # interior grads are per-pass scratch; only leaf grads accumulate
        # across repeated calls
        for node in topo:
            if node._backward_fn is not None:
                node.grad = None
        _accumulate(self, np.ones((), dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return add_scalar(self, -other)

    def __neg__(self):
        return neg(self)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _accumulate(tensor, grad_arr):
    if tensor.grad is None:
        tensor.grad = np.array(grad_arr, dtype=tensor.data.dtype, copy=True)
    else:
        tensor.grad += grad_arr


def _from_op(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype if hasattr(data, "dtype") else None)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_kind(a, b):
    """Classify the allowed shape pairing: equal, or trailing-singleton."""
    if a.shape == b.shape:
        return "equal"
    if b.data.ndim == a.data.ndim and b.shape == a.shape[:-1] + (1,):
        return "b_last1"
    if a.data.ndim == b.data.ndim and a.shape == b.shape[:-1] + (1,):
        return "a_last1"
    raise ShapeError(
        f"elementwise shapes {a.shape} and {b.shape} are neither equal nor "
        "related by a trailing singleton axis"
    )


def _reduce_last(grad):
    return grad.sum(axis=-1, keepdims=True)


def add(a, b):
    kind = _broadcast_kind(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_last(g) if kind == "a_last1" else g)
        if b.requires_grad:
            _accumulate(b, _reduce_last(g) if kind == "b_last1" else g)

    return _from_op(out_data, (a, b), backward)


def mul(a, b):
    kind = _broadcast_kind(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            ga = g * b.data
            _accumulate(a, _reduce_last(ga) if kind == "a_last1" else ga)
        if b.requires_grad:
            gb = g * a.data
            _accumulate(b, _reduce_last(gb) if kind == "b_last1" else gb)

    return _from_op(out_data, (a, b), backward)


def neg(a):
    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _from_op(-a.data, (a,), backward)


def add_scalar(a, c):
    c = float(c)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)

    return _from_op(a.data + c, (a,), backward)


def mul_scalar(a, c):
    c = float(c)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _from_op(a.data * c, (a,), backward)


def scale_channels(x, s):
    """Multiply x[:, c, ...] by the per-channel scalar s[c]."""
    if s.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != s.shape[0]:
        raise ShapeError(f"scale_channels: x {x.shape} vs s {s.shape}")
    view = s.data.reshape((1, -1) + (1,) * (x.data.ndim - 2))
    out_data = x.data * view

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * view)
        if s.requires_grad:
            axes = (0,) + tuple(range(2, x.data.ndim))
            _accumulate(s, (g * x.data).sum(axis=axes))

    return _from_op(out_data, (x, s), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x):
    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype))

    return _from_op(x.data.sum(), (x,), backward)


def mean_all(x):
    n = x.data.size

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.full(x.shape, float(g) / n, dtype=x.dtype))

    return _from_op(x.data.mean(), (x,), backward)


def mean_axis(x, axis, keepdims=True):
    axis = int(axis)
    n = x.shape[axis]
    out_data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg / n, x.shape).astype(x.dtype))

    return _from_op(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def absolute(x):
    sign = np.sign(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * sign)

    return _from_op(np.abs(x.data), (x,), backward)


def sqrt(x):
    out_data = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * 0.5 / out_data)

    return _from_op(out_data, (x,), backward)


def powf(x, p):
    p = float(p)
    out_data = np.power(x.data, p)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * p * np.power(x.data, p - 1.0))

    return _from_op(out_data, (x,), backward)


def cos(x):
    def backward(g):
        if x.requires_grad:
            _accumulate(x, -g * np.sin(x.data))

    return _from_op(np.cos(x.data), (x,), backward)


def sin(x):
    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * np.cos(x.data))

    return _from_op(np.sin(x.data), (x,), backward)


def atan2(y, x):
    if y.shape != x.shape:
        raise ShapeError(f"atan2 shapes differ: {y.shape} vs {x.shape}")
    denom = y.data * y.data + x.data * x.data

    def backward(g):
        if y.requires_grad:
            _accumulate(y, g * x.data / denom)
        if x.requires_grad:
            _accumulate(x, -g * y.data / denom)

    return _from_op(np.arctan2(y.data, x.data), (y, x), backward)


def sigmoid(x):
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * out_data * (1.0 - out_data))

    return _from_op(out_data, (x,), backward)


def tanh(x):
    out_data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * (1.0 - out_data * out_data))

    return _from_op(out_data, (x,), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    # exact erf form, not the tanh approximation
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            _accumulate(x, g * (cdf + x.data * pdf))

    return _from_op(x.data * cdf, (x,), backward)


def prelu(x, alpha):
    """PReLU with a learnable slope per channel (axis 1)."""
    if alpha.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != alpha.shape[0]:
        raise ShapeError(f"prelu: x {x.shape} vs alpha {alpha.shape}")
    view = alpha.data.reshape((1, -1) + (1,) * (x.data.ndim - 2))
    pos = x.data > 0
    out_data = np.where(pos, x.data, view * x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.where(pos, g, g * view))
        if alpha.requires_grad:
            axes = (0,) + tuple(range(2, x.data.ndim))
            _accumulate(alpha, np.where(pos, 0.0, g * x.data).sum(axis=axes))

    return _from_op(out_data, (x, alpha), backward)


def activation(x, kind, alpha=None):
    """Dispatch over the fixed activation inventory."""
    if kind == "prelu":
        return prelu(x, alpha)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(x, axes, gain, bias, eps=1e-5, channel_axis=1):
    """Normalize over `axes` to zero mean / unit variance, then apply a
    per-channel affine (gain, bias indexed along channel_axis).

    Covers both layer norm over channels (axes=(1,)) and instance-style
    norm over spatial axes (axes=(2, 3)).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = tuple(int(a) for a in axes)
    if gain.shape != (x.shape[channel_axis],) or bias.shape != gain.shape:
        raise ShapeError(
            f"affine shape {gain.shape} does not match channel extent "
            f"{x.shape[channel_axis]}"
        )
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    std = np.sqrt(var + eps)
    y = (x.data - mu) / std
    cview = (1,) * channel_axis + (-1,) + (1,) * (x.data.ndim - channel_axis - 1)
    gview = gain.data.reshape(cview)
    out_data = gview * y + bias.data.reshape(cview)

    def backward(g):
        if x.requires_grad:
            gh = g * gview
            m1 = gh.mean(axis=axes, keepdims=True)
            m2 = (gh * y).mean(axis=axes, keepdims=True)
            _accumulate(x, (gh - m1 - y * m2) / std)
        red = tuple(a for a in range(x.data.ndim) if a != channel_axis)
        if gain.requires_grad:
            _accumulate(gain, (g * y).sum(axis=red))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=red))

    return _from_op(out_data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    out_data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.shape))

    return _from_op(out_data, (x,), backward)


def transpose(x, perm):
    perm = tuple(int(p) for p in perm)
    inv = np.argsort(perm)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.transpose(g, inv))

    return _from_op(np.ascontiguousarray(np.transpose(x.data, perm)), (x,), backward)


def crop(x, axis, start, stop):
    axis = int(axis)
    sel = [slice(None)] * x.data.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=x.dtype)
            gx[sel] = g
            _accumulate(x, gx)

    return _from_op(np.ascontiguousarray(x.data[sel]), (x,), backward)


def concat(parts, axis=1):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    ref = parts[0].shape
    for p in parts[1:]:
        a, b = list(ref), list(p.shape)
        a[axis] = b[axis] = 0
        if a != b:
            raise ShapeError(
                f"concat: shape {p.shape} incompatible with {ref} on non-concat axes"
            )
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sel = [slice(None)] * g.ndim
                sel[axis] = slice(int(lo), int(hi))
                _accumulate(p, g[tuple(sel)])

    return _from_op(out_data, tuple(parts), backward)


def chunk(x, n, axis=1):
    extent = x.shape[axis]
    if extent % n != 0:
        raise ShapeError(
            f"cannot chunk axis {axis} of extent {extent} into {n} equal parts"
        )
    step = extent // n
    return [crop(x, axis, i * step, (i + 1) * step) for i in range(n)]


def chunk4(x):
    """Split the channel axis into four contiguous quarters."""
    if x.shape[1] % 4 != 0:
        raise ShapeError(f"chunk4 needs channels divisible by 4, got C={x.shape[1]}")
    return tuple(chunk(x, 4, axis=1))


def concat_channels(parts):
    return concat(parts, axis=1)


def repeat_axis(x, axis, times):
    """Nearest-neighbour upsampling: repeat each slice `times` along `axis`."""
    axis = int(axis)
    times = int(times)
    out_data = np.repeat(x.data, times, axis=axis)

    def backward(g):
        if x.requires_grad:
            shp = list(x.shape)
            shp[axis + 1:axis + 1] = [times]
            shp[axis] = x.shape[axis]
            _accumulate(x, g.reshape(shp).sum(axis=axis + 1))

    return _from_op(out_data, (x,), backward)


def stack(parts, axis=1):
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


def adaptive_avg_pool_to_one(x):
    """Compress the trailing time axis of [B, C, T] to a single mean value."""
    if x.data.ndim != 3:
        raise ShapeError(f"expected [B, C, T], got {x.shape}")
    if x.shape[-1] < 1:
        raise ShapeError("empty time axis")
    return mean_axis(x, axis=2, keepdims=True)


# ---------------------------------------------------------------------------
# serialization: flat binary container
# ---------------------------------------------------------------------------

def save_tensor(path, tensor):
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    dtype = np.dtype(data.dtype)
    if dtype not in _DTYPE_TAGS:
        raise ValueError(f"unsupported dtype {dtype}")
    header = _MAGIC + struct.pack("<II", _FORMAT_VERSION, data.ndim)
    header += struct.pack(f"<{data.ndim}Q", *data.shape)
    header += struct.pack("<I", _DTYPE_TAGS[dtype])
    payload = np.ascontiguousarray(data).astype(dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_tensor(path, requires_grad=False):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 12
    extents = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    (tag,) = struct.unpack_from("<I", blob, off)
    off += 4
    if tag not in _TAG_DTYPES:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(extents)) if rank else 1
    arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=count, offset=off)
    arr = arr.astype(dtype).reshape(extents)
    return Tensor(arr, requires_grad=requires_grad, dtype=dtype)
