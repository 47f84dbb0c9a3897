"""Minimal module system: parameter discovery, train/eval mode and weight tables.

Parameters are found by scanning instance attributes in insertion order, so
names are stable across processes (`cells.2.edges.5.ops.4.dw1.weight`).
Running statistics are plain numpy buffers listed in `buffer_names`.
"""

import logging
from collections.abc import Iterator

import numpy as np

from src.common.errors import InitError
from src.tensor import functional as F
from src.tensor.core import Parameter, Tensor, default_dtype

logger = logging.getLogger(__name__)


class Module:
    buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args, **kwargs) -> Tensor:
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by dotted name."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into existing parameters and buffers in place.

        Raises:
            InitError: a name is missing or unexpected (strict mode), or a shape differs.
        """
        targets: dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        if strict:
            missing = sorted(set(targets) - set(state))
            unexpected = sorted(set(state) - set(targets))
            if missing or unexpected:
                raise InitError(
                    f"weight table mismatch: missing={missing[:5]} unexpected={unexpected[:5]}"
                    f" ({len(missing)} missing, {len(unexpected)} unexpected)"
                )
        for name, target in targets.items():
            if name not in state:
                continue
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise InitError(f"shape mismatch for {name}: checkpoint {source.shape}, model {target.shape}")
            target[...] = source


class ModuleList(Module):
    """Indexed children; a `None` slot holds a discarded module and owns no weights."""

    def __init__(self, items: list[Module | None] | None = None):
        super().__init__()
        self.items: list[Module | None] = list(items or [])

    def named_children(self) -> Iterator[tuple[str, Module]]:
        for i, item in enumerate(self.items):
            if item is not None:
                yield str(i), item

    def __getitem__(self, index: int) -> Module | None:
        return self.items[index]

    def __setitem__(self, index: int, value: Module | None) -> None:
        self.items[index] = value

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Module | None]:
        return iter(self.items)


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    """Bias-free convolution (every conv here is followed by batch norm)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
    ):
        super().__init__()
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        fan_in = shape[1] * kernel_size * kernel_size
        self.weight = Parameter(kaiming_normal(rng, shape, fan_in))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm(Module):
    """Batch normalization for (N, C) or (N, C, H, W) inputs."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, affine: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps, self.affine = momentum, eps, affine
        if affine:
            self.weight = Parameter(np.ones(channels))
            self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        weight = self.weight if self.affine else None
        bias = self.bias if self.affine else None
        return F.batch_norm(
            x, weight, bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
        bias = np.zeros(out_features) if zero_bias else rng.uniform(-bound, bound, out_features)
        self.bias = Parameter(bias)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
