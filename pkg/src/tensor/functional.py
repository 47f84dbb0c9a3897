"""Differentiable operations over `Tensor`.

Each op computes its forward value with numpy and records a closure that maps
the output gradient to one gradient per input (None where an input is
constant). Shapes follow NCHW for images and (N, D) for feature rows.
"""

import logging

import numpy as np

from src.common.errors import ContractError, DimensionError, NumericError
from src.tensor import kernels
from src.tensor.core import OpKind, Tensor, default_dtype, record

logger = logging.getLogger(__name__)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")


# elementwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_add(a, float(b))
    return record(
        OpKind.ADD,
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_add(a, -float(b))
    return record(
        OpKind.SUB,
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(a, float(b))
    return record(
        OpKind.MUL,
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scalar_add(a: Tensor, c: float) -> Tensor:
    return record(OpKind.SCALAR_ADD, (a,), a.data + c, lambda g: (g,))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return record(OpKind.SCALAR_MUL, (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(OpKind.RELU, (x,), np.where(mask, x.data, 0), lambda g: (g * mask,), {"mask": mask})


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    _check_finite(out, "exp")
    return record(OpKind.EXP, (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return record(OpKind.LOG, (x,), np.log(x.data), lambda g: (g / x.data,))


# shape and reductions


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape
    return record(OpKind.RESHAPE, (x,), x.data.reshape(shape), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return record(OpKind.TRANSPOSE, (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return record(OpKind.GETITEM, (x,), np.array(x.data[index]), backward_fn)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(OpKind.SUM, (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), backward_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record(OpKind.MEAN, (x,), np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an NCHW tensor, giving (N, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW input, got shape {x.shape}")
    return mean(x, axis=(2, 3))


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat along axis {axis}: {e}") from e
    return record(OpKind.CONCAT, tuple(tensors), data, lambda g: tuple(np.split(g, bounds, axis=axis)))


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return record(OpKind.MATMUL, (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b with weight shaped (out, in)."""
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


# convolution and pooling


def conv2d(
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation via patch gather and a batched matmul.

    Raises:
        DimensionError: channel counts do not match `weight` and `groups`,
            or the window does not fit the input.
        NumericError: the output contains NaN/Inf.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_group, kh, kw = weight.shape
    if c_in % groups or c_out % groups:
        raise DimensionError(f"channels in={c_in} out={c_out} not divisible by groups={groups}")
    if c_group != c_in // groups:
        raise DimensionError(
            f"weight expects {c_group} channels per group, input gives {c_in // groups} (groups={groups})"
        )
    cols = kernels.im2col(x.data, kh, kw, stride, padding, dilation)
    oh, ow = cols.shape[-2:]
    k = c_group * kh * kw
    cols_g = cols.reshape(n, groups, k, oh * ow)
    w_g = weight.data.reshape(groups, c_out // groups, k)
    out = np.matmul(w_g[None], cols_g).reshape(n, c_out, oh, ow)
    _check_finite(out, "conv2d")

    def backward_fn(g):
        g_g = g.reshape(n, groups, c_out // groups, oh * ow)
        gw = np.matmul(g_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(w_g.transpose(0, 2, 1)[None], g_g).reshape(cols.shape)
        gx = kernels.col2im(gcols, x.shape, stride, padding, dilation)
        return gx, gw

    saved = {"stride": stride, "padding": padding, "dilation": dilation, "groups": groups}
    return record(OpKind.CONV2D, (x, weight), out, backward_fn, saved)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    cols = kernels.im2col(x.data.reshape(n * c, 1, h, w), kernel, kernel, stride, padding, 1, -np.inf)
    oh, ow = cols.shape[-2:]
    flat = cols.reshape(n * c, kernel * kernel, oh, ow)
    arg = flat.argmax(axis=1)
    out = np.take_along_axis(flat, arg[:, None], axis=1)[:, 0].reshape(n, c, oh, ow)

    def backward_fn(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[:, None], g.reshape(n * c, 1, oh, ow), axis=1)
        gx = kernels.col2im(gflat.reshape(cols.shape), (n * c, 1, h, w), stride, padding, 1)
        return (gx.reshape(x.shape),)

    return record(OpKind.MAX_POOL2D, (x,), out, backward_fn, {"argmax": arg})


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling that excludes zero padding from each window's count."""
    n, c, h, w = x.shape
    cols = kernels.im2col(x.data.reshape(n * c, 1, h, w), kernel, kernel, stride, padding, 1)
    oh, ow = cols.shape[-2:]
    ones = np.ones((1, 1, h, w), dtype=x.dtype)
    counts = kernels.im2col(ones, kernel, kernel, stride, padding, 1)
    counts = counts.reshape(kernel * kernel, oh, ow).sum(axis=0)
    out = (cols.reshape(n * c, kernel * kernel, oh, ow).sum(axis=1) / counts).reshape(n, c, oh, ow)

    def backward_fn(g):
        per_cell = (g.reshape(n * c, 1, oh, ow) / counts)[:, :, None]
        gcols = np.broadcast_to(per_cell, (n * c, 1, kernel * kernel, oh, ow)).reshape(cols.shape)
        gx = kernels.col2im(np.ascontiguousarray(gcols), (n * c, 1, h, w), stride, padding, 1)
        return (gx.reshape(x.shape),)

    return record(OpKind.AVG_POOL2D, (x,), out, backward_fn, {"counts": counts})


# normalization


def batch_norm(
    x: Tensor,
    weight: Tensor | None,
    bias: Tensor | None,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, C) or (N, C, H, W).

    In training mode the batch statistics normalize the input and the running
    statistics are updated in place (unbiased variance); otherwise the running
    statistics are used.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects 2-D or 4-D input, got shape {x.shape}")
    if x.shape[1] != running_mean.shape[0]:
        raise DimensionError(f"batch_norm over {running_mean.shape[0]} channels got {x.shape[1]}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    count = x.size // x.shape[1]

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu = running_mean
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(bshape) + bias.data.reshape(bshape)

    inputs = (x,) if weight is None else (x, weight, bias)

    def backward_fn(g):
        gxhat = g * weight.data.reshape(bshape) if weight is not None else g
        if training:
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv_std.reshape(bshape) * (gxhat - s1 / count - xhat * s2 / count)
        else:
            gx = gxhat * inv_std.reshape(bshape)
        if weight is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record(OpKind.BATCH_NORM, inputs, out, backward_fn, {"training": training})


# probabilities and similarities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return record(OpKind.SOFTMAX, (x,), y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)
    return record(OpKind.LOG_SOFTMAX, (x,), y, lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x: Tensor, axis: int = 1) -> Tensor:
    """Scale rows to unit Euclidean norm.

    Raises:
        NumericError: a row has zero norm.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise NumericError("l2_normalize of a zero-norm vector")
    y = x.data / norm
    return record(
        OpKind.L2_NORMALIZE,
        (x,),
        y,
        lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,),
    )


def cosine_similarity(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Row-wise cosine similarity of two equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shapes {a.shape} and {b.shape} differ")
    return sum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


def pairwise_cosine(z: Tensor) -> Tensor:
    """(M, D) rows -> (M, M) matrix of cosine similarities."""
    zn = l2_normalize(z, axis=1)
    return matmul(zn, transpose(zn))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits)."""
    n, classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} logits rows")
    onehot = np.zeros((n, classes), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = sum(mul(log_softmax(logits, axis=1), Tensor(onehot)))
    return scalar_mul(picked, -1.0 / n)


def drop_path(x: Tensor, drop_prob: float, rng: np.random.Generator) -> Tensor:
    """Zero whole samples with probability `drop_prob`, rescaling the survivors."""
    if drop_prob <= 0.0:
        return x
    keep = 1.0 - drop_prob
    mask = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) < keep).astype(x.dtype) / keep
    return mul(x, Tensor(mask))
