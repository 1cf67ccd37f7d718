"""Dense tensor kernels used by every layer.

Tensors are plain ``numpy.ndarray`` objects. Networks hold float32 arrays;
the kernels themselves keep the dtype of their inputs, so gradient checks can
run the same code in float64.

Summation order: forward products go through :func:`matmul`, which sums each
output over the inner index in ascending order, so an output never depends on
how many other rows or columns take part. Gradient products use BLAS through
:func:`gemm`, which is bit-stable for identical shapes.
"""

from __future__ import annotations

import logging
import math
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

logger = logging.getLogger("maxprune.tensor")

DTYPE = np.float32

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    """Return a PCG64 generator; the stream depends only on ``seed``."""

    return np.random.Generator(np.random.PCG64(int(seed)))


def check_shape(dims: Sequence[int]) -> Tuple[int, ...]:
    """Validate a shape: at least one dim, every dim >= 1."""

    dims = tuple(int(d) for d in dims)
    if not dims or any(d < 1 for d in dims):
        raise DimensionError(f"invalid shape {dims}: every dimension must be >= 1")
    return dims


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Return ``data`` as a contiguous float32 array, optionally reshaped."""

    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        dims = check_shape(shape)
        if arr.size != math.prod(dims):
            raise DimensionError(
                f"cannot view {arr.size} elements as shape {dims}"
            )
        arr = arr.reshape(dims)
    return arr


def _check_product(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a`` (M×K) and ``b`` (K×N) in a fixed order.

    Every output is accumulated as ((a[i,0]·b[0,j] + a[i,1]·b[1,j]) + ...)
    over ascending k, using elementwise ufuncs only. An output's bits
    therefore depend on its own row of ``a`` and column of ``b`` and not
    on M or N, so dropping rows or columns leaves the rest unchanged.
    """

    _check_product(a, b)
    m, k = a.shape
    out = np.zeros((m, b.shape[1]), dtype=np.result_type(a, b))
    if k == 0 or out.size == 0:
        return out
    columns = np.ascontiguousarray(a.T)
    term = np.empty_like(out)
    for i in range(k):
        np.multiply(columns[i][:, None], b[i][None, :], out=term)
        out += term
    return out


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """BLAS matrix product for gradients; deterministic for fixed shapes."""

    _check_product(a, b)
    return np.matmul(a, b)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """Unfold ``x`` (B×C×H×W) into a (B·H'·W') × (C·kh·kw) matrix.

    Rows are ordered batch-major then row-major over output positions;
    columns follow the (C, kh, kw) layout of a filter bank.
    """

    b, c, h, w = x.shape
    if kh > h or kw > w:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than input {h}x{w} (input shape {x.shape})"
        )
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)


def col2im(
    cols: np.ndarray, x_shape: Tuple[int, ...], kh: int, kw: int, stride: int = 1
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""

    b, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride)
    ow = conv_output_size(w, kw, stride)
    patches = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                patches[:, :, i, j]
            )
    return out


def conv2d(
    x: np.ndarray, filters: np.ndarray, bias: np.ndarray, stride: int = 1
) -> np.ndarray:
    """Valid cross-correlation of ``x`` (B×C×H×W) with ``filters`` (F×C×kh×kw)."""

    if x.ndim != 4 or filters.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and filters, got {x.shape} and {filters.shape}"
        )
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    b, c, h, w = x.shape
    f, fc, kh, kw = filters.shape
    if fc != c:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs filters {filters.shape}"
        )
    if bias.shape != (f,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({f},)")
    cols = im2col(x, kh, kw, stride)
    oh = conv_output_size(h, kh, stride)
    ow = conv_output_size(w, kw, stride)
    out = matmul(cols, filters.reshape(f, -1).T) + bias
    return np.ascontiguousarray(out.reshape(b, oh, ow, f).transpose(0, 3, 1, 2))


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    filters: np.ndarray,
    stride: int = 1,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_x, grad_filters, grad_bias) of :func:`conv2d`."""

    f, c, kh, kw = filters.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, f)
    cols = im2col(x, kh, kw, stride)
    grad_filters = gemm(g.T, cols).reshape(filters.shape)
    grad_bias = g.sum(axis=0)
    grad_cols = gemm(g, filters.reshape(f, -1))
    grad_x = col2im(grad_cols, x.shape, kh, kw, stride)
    return grad_x, grad_filters, grad_bias


def maxpool2d(x: np.ndarray, window: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2×2 max pooling.

    Returns the pooled tensor and, per output element, the flat index of the
    winning element inside its H×W input plane. Ties go to the lowest index.
    """

    if window != 2:
        raise DimensionError(f"only 2x2 pooling is supported, got window {window}")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even height and width, got {x.shape}")
    oh, ow = h // 2, w // 2
    blocks = x.reshape(b, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, 4)
    slot = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, slot[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(oh)[:, None] + slot // 2
    cols = 2 * np.arange(ow)[None, :] + slot % 2
    return out, rows * w + cols


def maxpool2d_backward(
    grad_out: np.ndarray, argmax: np.ndarray, x_shape: Tuple[int, ...]
) -> np.ndarray:
    """Route ``grad_out`` to the winners recorded by :func:`maxpool2d`."""

    b, c, h, w = x_shape
    if argmax.shape != grad_out.shape:
        raise DimensionError(
            f"argmax map {argmax.shape} does not match gradient {grad_out.shape}"
        )
    grad = np.zeros((b, c, h * w), dtype=grad_out.dtype)
    np.put_along_axis(grad, argmax.reshape(b, c, -1), grad_out.reshape(b, c, -1), axis=-1)
    return grad.reshape(x_shape)


def glorot_init(shape: Sequence[int], fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    """Uniform Glorot initialization in ±sqrt(6 / (fan_in + fan_out))."""

    dims = check_shape(shape)
    if fan_in < 1 or fan_out < 1:
        raise DimensionError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=dims).astype(DTYPE)
