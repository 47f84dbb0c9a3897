"""Candidate operations of the cell search space and the composite blocks around them.

The candidate set is the eight-operation DARTS space. Convolutional candidates
use ReLU -> conv -> BN ordering; pooling candidates carry a non-affine batch
norm so their output scale matches the convolutions.
"""

import logging

import numpy as np

from src.common.errors import ContractError, DimensionError
from src.tensor import functional as F
from src.tensor.core import Tensor
from src.tensor.layers import BatchNorm, Conv2d, Linear, Module

logger = logging.getLogger(__name__)

PRIMITIVES: tuple[str, ...] = (
    "none",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
NON_PARAMETERIZED = frozenset({"none", "max_pool_3x3", "avg_pool_3x3", "skip_connect"})
NONE_INDEX = PRIMITIVES.index("none")


class ReLUConvBN(Module):
    def __init__(
        self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, rng: np.random.Generator
    ):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, padding=padding)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(F.relu(x)))


class FactorizedReduce(Module):
    """Halve the spatial size with two offset 1x1 stride-2 convolutions."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        if c_out % 2:
            raise DimensionError(f"FactorizedReduce needs an even output width, got {c_out}")
        self.conv_1 = Conv2d(c_in, c_out // 2, 1, rng, stride=2)
        self.conv_2 = Conv2d(c_in, c_out // 2, 1, rng, stride=2)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"FactorizedReduce needs even spatial dims, got {x.shape[2:]}")
        x = F.relu(x)
        shifted = x[:, :, 1:, 1:]
        return self.bn(F.concat([self.conv_1(x), self.conv_2(shifted)], axis=1))


class CandidateOp(Module):
    """One entry of the candidate set on an edge.

    Args:
        kind: Name from PRIMITIVES.
        channels: C, the input and output width.
        stride: 1, or 2 on reduction-cell input edges.
    """

    def __init__(self, kind: str, channels: int, stride: int):
        super().__init__()
        self.kind = kind
        self.channels = channels
        self.stride = stride

    @property
    def parameterized(self) -> bool:
        return self.kind not in NON_PARAMETERIZED


class Zero(CandidateOp):
    def __init__(self, channels: int, stride: int):
        super().__init__("none", channels, stride)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        return Tensor(np.zeros((n, c, h // self.stride, w // self.stride), dtype=x.dtype))


class SkipConnect(CandidateOp):
    def __init__(self, channels: int, stride: int, rng: np.random.Generator):
        super().__init__("skip_connect", channels, stride)
        if stride == 2:
            self.reduce = FactorizedReduce(channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x if self.stride == 1 else self.reduce(x)


class PoolBN(CandidateOp):
    def __init__(self, kind: str, channels: int, stride: int):
        super().__init__(kind, channels, stride)
        self.bn = BatchNorm(channels, affine=False)

    def forward(self, x: Tensor) -> Tensor:
        pool = F.max_pool2d if self.kind == "max_pool_3x3" else F.avg_pool2d
        return self.bn(pool(x, 3, self.stride, 1))


class SepConv(CandidateOp):
    """Two stacked (ReLU, depthwise k x k, pointwise 1x1, BN) stages; only the first strides."""

    def __init__(self, kernel: int, channels: int, stride: int, rng: np.random.Generator):
        super().__init__(f"sep_conv_{kernel}x{kernel}", channels, stride)
        c, pad = channels, kernel // 2
        self.dw1 = Conv2d(c, c, kernel, rng, stride=stride, padding=pad, groups=c)
        self.pw1 = Conv2d(c, c, 1, rng)
        self.bn1 = BatchNorm(c)
        self.dw2 = Conv2d(c, c, kernel, rng, stride=1, padding=pad, groups=c)
        self.pw2 = Conv2d(c, c, 1, rng)
        self.bn2 = BatchNorm(c)

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn1(self.pw1(self.dw1(F.relu(x))))
        return self.bn2(self.pw2(self.dw2(F.relu(x))))


class DilConv(CandidateOp):
    """One (ReLU, dilated depthwise k x k, pointwise 1x1, BN) stage with dilation 2."""

    def __init__(self, kernel: int, channels: int, stride: int, rng: np.random.Generator):
        super().__init__(f"dil_conv_{kernel}x{kernel}", channels, stride)
        c = channels
        self.dw = Conv2d(c, c, kernel, rng, stride=stride, padding=kernel - 1, dilation=2, groups=c)
        self.pw = Conv2d(c, c, 1, rng)
        self.bn = BatchNorm(c)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.pw(self.dw(F.relu(x))))


def build_op(kind: str, channels: int, stride: int, rng: np.random.Generator) -> CandidateOp:
    if stride not in (1, 2):
        raise DimensionError(f"candidate stride must be 1 or 2, got {stride}")
    match kind:
        case "none":
            return Zero(channels, stride)
        case "skip_connect":
            return SkipConnect(channels, stride, rng)
        case "max_pool_3x3" | "avg_pool_3x3":
            return PoolBN(kind, channels, stride)
        case "sep_conv_3x3" | "sep_conv_5x5":
            return SepConv(int(kind[-1]), channels, stride, rng)
        case "dil_conv_3x3" | "dil_conv_5x5":
            return DilConv(int(kind[-1]), channels, stride, rng)
    raise ContractError(f"unknown candidate operation {kind!r}")


def apply_op(op: CandidateOp, x: Tensor) -> Tensor:
    """Run one candidate on an NCHW input after checking the channel contract."""
    if x.ndim != 4 or x.shape[1] != op.channels:
        raise DimensionError(f"{op.kind} expects {op.channels} channels, got input shape {x.shape}")
    return op(x)


class Stem(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng, padding=1)
        self.bn = BatchNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class Classifier(Module):
    """Global average pool followed by a linear layer."""

    def __init__(self, features: int, classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(features, classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 4:
            x = F.global_avg_pool(x)
        return self.fc(x)


class ProjectionNeck(Module):
    """Linear -> ReLU -> Linear head on pooled encoder features, used only while searching."""

    def __init__(self, features: int, hidden_dim: int, output_dim: int, rng: np.random.Generator):
        super().__init__()
        self.hidden_dim, self.output_dim = hidden_dim, output_dim
        self.fc1 = Linear(features, hidden_dim, rng, zero_bias=False)
        self.fc2 = Linear(hidden_dim, output_dim, rng, zero_bias=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 4:
            x = F.global_avg_pool(x)
        return self.fc2(F.relu(self.fc1(x)))


def build_stem(in_channels: int, init_channels: int, rng: np.random.Generator) -> Stem:
    """Stem producing 3 * init_channels feature maps at input resolution."""
    if in_channels < 1 or init_channels < 1:
        raise DimensionError("stem dimensions must be positive")
    return Stem(in_channels, 3 * init_channels, rng)


def build_classifier(features: int, classes: int, rng: np.random.Generator) -> Classifier:
    if features < 1 or classes < 1:
        raise DimensionError("classifier dimensions must be positive")
    return Classifier(features, classes, rng)


def build_projection(features: int, hidden: int, out: int, rng: np.random.Generator) -> ProjectionNeck:
    if min(features, hidden, out) < 1:
        raise DimensionError("projection dimensions must be positive")
    return ProjectionNeck(features, hidden, out, rng)
