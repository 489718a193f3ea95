"""Dense C x H x W tensors and the numerical kernels the rest of the package uses.

The array kernels (``conv2d_same_array`` and friends) accept any number of
leading batch axes and treat axis ``-3`` as the channel axis.  The
:class:`Tensor3` functions are thin, shape-checked wrappers around them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "UndefinedSimilarityError",
    "Tensor3",
    "ConvLayer",
    "elementwise",
    "relu",
    "channel_softmax",
    "conv2d_same",
    "cosine_similarity",
    "write_tfb",
    "read_tfb",
]

DTYPES = {"single": np.float32, "double": np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TFB_MAGIC = b"TFB1"


class ShapeMismatchError(ValueError):
    pass


class UndefinedSimilarityError(ValueError):
    pass


def resolve_dtype(precision):
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'") from None


@dataclass(frozen=True, eq=False)
class Tensor3:
    """Immutable channel-major feature map.

    ``data`` is kept as a read-only ``(C, H, W)`` ndarray; ``flat`` exposes
    the row-major storage order used by the TFB1 file format.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"Tensor3 needs a non-empty (C, H, W) array, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.array(arr, copy=True, order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, channels, height, width, precision="double"):
        return cls(np.zeros((channels, height, width), dtype=resolve_dtype(precision)))

    @classmethod
    def from_flat(cls, values, channels, height, width, precision="double"):
        values = np.asarray(values, dtype=resolve_dtype(precision))
        if values.size != channels * height * width:
            raise ValueError(
                f"flat data has {values.size} entries, expected {channels}*{height}*{width}"
            )
        return cls(values.reshape(channels, height, width))

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def precision(self):
        return "single" if self.data.dtype == np.float32 else "double"

    @property
    def flat(self):
        return self.data.reshape(-1)

    def astype(self, precision):
        return Tensor3(self.data.astype(resolve_dtype(precision)))

    def __repr__(self):
        return f"Tensor3(shape={self.shape}, precision={self.precision})"


@dataclass(frozen=True, eq=False)
class ConvLayer:
    """One square, odd-sized convolution: weights ``[out, in, k, k]`` and bias ``[out]``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"conv weights must be [out, in, k, k], got {w.shape}")
        if w.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match out_channels {w.shape[0]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2]


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


# -- array kernels -----------------------------------------------------------


def channel_softmax_array(x):
    shifted = x - x.max(axis=-3, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-3, keepdims=True)


def _im2col(x4, k):
    """``(N, Cin, H, W)`` -> ``(N, Cin*k*k, H*W)`` with zero "same" padding."""
    n, c, h, w = x4.shape
    if k == 1:
        return x4.reshape(n, c, h * w)
    p = k // 2
    xp = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, c, k, k, h, w), dtype=x4.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * k * k, h * w)


def conv2d_same_array(x, weights, bias=None):
    """Stride-1 zero-padded convolution (cross-correlation) of ``x[..., Cin, H, W]``."""
    k = weights.shape[-1]
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    x4 = x.reshape((-1,) + x.shape[-3:])
    cols = _im2col(x4, k)
    out = np.matmul(weights.reshape(weights.shape[0], -1).astype(x.dtype, copy=False), cols)
    if bias is not None:
        out += bias.astype(x.dtype, copy=False)[:, None]
    return out.reshape(lead + (weights.shape[0], h, w))


def conv2d_same_backward_array(x, weights, grad_out):
    """Gradients of :func:`conv2d_same_array` w.r.t. input, weights and bias."""
    k = weights.shape[-1]
    lead = x.shape[:-3]
    x4 = x.reshape((-1,) + x.shape[-3:])
    n, cout = x4.shape[0], weights.shape[0]
    g = grad_out.reshape(n, cout, -1)
    cols = _im2col(x4, k)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weights.shape)
    grad_b = g.sum(axis=(0, 2))
    flipped = weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = conv2d_same_array(grad_out.reshape((n, cout) + x4.shape[2:]), flipped)
    return grad_x.reshape(lead + grad_x.shape[1:]), grad_w.astype(x.dtype), grad_b


# -- Tensor3 operations --------------------------------------------------------

_ELEMENTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op, a, b):
    """``a op b`` entry by entry for ``op`` in {"add", "sub", "mul"}."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    _check_same(a, b)
    return Tensor3(fn(a.data, b.data))


def relu(a):
    return Tensor3(np.maximum(a.data, 0))


def channel_softmax(a):
    """Softmax across channels, independently at each (h, w) location."""
    return Tensor3(channel_softmax_array(a.data))


def conv2d_same(inp, layer):
    if inp.channels != layer.in_channels:
        raise ShapeMismatchError(
            f"conv expects {layer.in_channels} input channels, got {inp.channels}"
        )
    w = layer.weights.astype(inp.data.dtype, copy=False)
    b = layer.bias.astype(inp.data.dtype, copy=False)
    return Tensor3(conv2d_same_array(inp.data, w, b))


def cosine_similarity(a, b):
    """Cosine of the angle between ``a`` and ``b`` flattened over C*H*W.

    Raises :class:`UndefinedSimilarityError` if either tensor is all zero.
    """
    _check_same(a, b)
    x = a.data.astype(np.float64).ravel()
    y = b.data.astype(np.float64).ravel()
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise UndefinedSimilarityError("cosine similarity is undefined for an all-zero tensor")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


# -- TFB1 files ----------------------------------------------------------------


def encode_tfb(array):
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ValueError(f"TFB1 stores rank-3 arrays, got rank {arr.ndim}")
    code = _DTYPE_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"TFB1 stores float32/float64, got {arr.dtype}")
    header = TFB_MAGIC + struct.pack("<5I", 3, *arr.shape, code)
    return header + np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()


def decode_tfb(buf):
    if buf[:4] != TFB_MAGIC:
        raise ValueError("not a TFB1 file (bad magic)")
    rank, c, h, w, code = struct.unpack_from("<5I", buf, 4)
    if rank != 3:
        raise ValueError(f"unsupported TFB1 rank {rank}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown TFB1 dtype code {code}")
    dtype = _CODE_DTYPES[code]
    payload = buf[24:]
    if len(payload) != c * h * w * dtype.itemsize:
        raise ValueError("TFB1 payload length does not match header")
    return np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("=")).reshape(c, h, w)


def write_tfb(path, tensor):
    data = tensor.data if isinstance(tensor, Tensor3) else tensor
    Path(path).write_bytes(encode_tfb(data))


def read_tfb(path):
    return Tensor3(decode_tfb(Path(path).read_bytes()))
