"""Optimizers for operation weights and architecture logits.

Both optimizers keep their state keyed by parameter name and take the named
parameters to update at every step. A parameter whose `grad` is None was not
on the sampled path and is left untouched, state included. Pruning simply
stops passing the discarded names; `retain` then drops their state.
"""

import logging
import math
from collections.abc import Iterable

import numpy as np

from src.common.errors import CheckpointError, NumericError
from src.tensor.core import Parameter

logger = logging.getLogger(__name__)

NamedParams = Iterable[tuple[str, Parameter]]


def cosine_lr(lr0: float, epoch: int, total: int, lr_min: float = 0.0) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / total)) / 2."""
    return lr_min + (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total)) / 2.0


def zero_grad(params: NamedParams) -> None:
    for _, p in params:
        p.grad = None


def check_finite_grads(params: NamedParams) -> None:
    for name, p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in {name}")


def clip_grad_norm(params: NamedParams, max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most `max_norm`.

    Returns:
        The norm before clipping.
    """
    grads = [p.grad for _, p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if not math.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= g.dtype.type(scale)
    return total


class SGD:
    """Momentum SGD with L2 weight decay: buf = mu * buf + (g + wd * w); w -= lr * buf."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: NamedParams, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in params:
            if p.grad is None:
                continue
            d = p.grad + p.data * p.dtype.type(self.weight_decay) if self.weight_decay else p.grad
            if self.momentum:
                buf = self.buffers.get(name)
                if buf is None:
                    buf = self.buffers[name] = d.astype(p.dtype, copy=True)
                else:
                    buf *= p.dtype.type(self.momentum)
                    buf += d
                d = buf
            p.data -= p.dtype.type(lr) * d

    def retain(self, names: Iterable[str]) -> None:
        keep = set(names)
        self.buffers = {k: v for k, v in self.buffers.items() if k in keep}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"momentum/{k}": v.copy() for k, v in self.buffers.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.buffers = {k.removeprefix("momentum/"): v.copy() for k, v in state.items()}


class Adam:
    """Adaptive moments with bias correction and a per-parameter step count."""

    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.0, 0.99),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: NamedParams) -> None:
        b1, b2 = self.betas
        for name, p in params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            t = self.t.get(name, 0) + 1
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
            self.m[name], self.v[name], self.t[name] = m, v, t

    def retain(self, names: Iterable[str]) -> None:
        keep = set(names)
        self.m = {k: v for k, v in self.m.items() if k in keep}
        self.v = {k: v for k, v in self.v.items() if k in keep}
        self.t = {k: v for k, v in self.t.items() if k in keep}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"m/{k}": v.copy() for k, v in self.m.items()}
        state.update({f"v/{k}": v.copy() for k, v in self.v.items()})
        state.update({f"t/{k}": np.array([v], dtype=np.int64) for k, v in self.t.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for key, value in state.items():
            kind, _, name = key.partition("/")
            match kind:
                case "m":
                    self.m[name] = value.astype(np.float64, copy=True)
                case "v":
                    self.v[name] = value.astype(np.float64, copy=True)
                case "t":
                    self.t[name] = int(value.reshape(-1)[0])
                case _:
                    raise CheckpointError(f"unexpected adaptive-moment state entry {key!r}")
