"""Patch gather/scatter kernels (im2col / col2im) shared by convolution and pooling."""

import numpy as np

from src.common.errors import DimensionError


def output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    """Spatial output length of a sliding window, `floor((n + 2p - d(k-1) - 1)/s) + 1`."""
    out = (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1
    if out < 1:
        raise DimensionError(
            f"window k={kernel} s={stride} p={padding} d={dilation} does not fit input length {size}"
        )
    return out


def im2col(
    x: np.ndarray, kh: int, kw: int, stride: int, padding: int, dilation: int, pad_value: float = 0.0
) -> np.ndarray:
    """Gather sliding patches of an NCHW array.

    Returns:
        Array of shape (N, C, kh, kw, out_h, out_w).
    """
    n, c, h, w = x.shape
    oh = output_size(h, kh, stride, padding, dilation)
    ow = output_size(w, kw, stride, padding, dilation)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=pad_value)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            cols[:, :, i, j] = x[:, :, y0 : y0 + stride * oh : stride, x0 : x0 + stride * ow : stride]
    return cols


def col2im(
    cols: np.ndarray, input_shape: tuple[int, ...], stride: int, padding: int, dilation: int
) -> np.ndarray:
    """Scatter-add patches produced by `im2col` back onto an NCHW array."""
    n, c, h, w = input_shape
    _, _, kh, kw, oh, ow = cols.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            out[:, :, y0 : y0 + stride * oh : stride, x0 : x0 + stride * ow : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return out
