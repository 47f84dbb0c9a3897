"""Dense tensors and the creation-ordered tape used for reverse-mode gradients.

Every differentiable op in `src.tensor.functional` appends one TapeNode to the
tape of the calling thread when at least one input requires a gradient.
`backward` walks that tape in exact reverse creation order, so the recorded
graph never needs a topological sort.

Storage defaults to float32. `precision(np.float64)` switches newly created
tensors to float64, which is what the tight finite-difference checks use.
"""

import logging
import threading
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from src.common.errors import ContractError

logger = logging.getLogger(__name__)

_state = threading.local()


class OpKind(str, Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    SCALAR_ADD = "scalar_add"
    SCALAR_MUL = "scalar_mul"
    MATMUL = "matmul"
    CONV2D = "conv2d"
    MAX_POOL2D = "max_pool2d"
    AVG_POOL2D = "avg_pool2d"
    RELU = "relu"
    BATCH_NORM = "batch_norm"
    CONCAT = "concat"
    SUM = "sum"
    MEAN = "mean"
    SOFTMAX = "softmax"
    LOG_SOFTMAX = "log_softmax"
    LOG = "log"
    EXP = "exp"
    L2_NORMALIZE = "l2_normalize"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    GETITEM = "getitem"


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Create tensors with `dtype` (float32 or float64) inside the block."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported tensor dtype {dtype}")
    previous = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = previous


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording anything on the tape."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A dense n-dimensional float array that may take part in the tape.

    Args:
        data: Array-like values; converted to the current default dtype
            unless already a floating array.
        requires_grad: Whether backward should produce `grad` for this tensor.
        name: Optional label used in error messages and weight tables.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_retain", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the implementations live in src.tensor.functional.
    def __add__(self, other):
        return F.add(self, other)

    def __radd__(self, other):
        return F.add(self, other)

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.add(F.scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        return F.mul(self, other)

    def __rmul__(self, other):
        return F.mul(self, other)

    def __neg__(self):
        return F.scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor / tensor is not supported; use l2_normalize or mul")
        return F.scalar_mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return F.matmul(self, other)

    def __getitem__(self, index):
        return F.getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return F.mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return F.transpose(self)


class Parameter(Tensor):
    """A trainable leaf tensor owned by a module."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


@dataclass(eq=False)
class TapeNode:
    """One recorded op: its inputs, cached values and the vector-Jacobian product."""

    op_kind: OpKind
    inputs: tuple[Tensor, ...]
    saved: dict
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = Tape()
        _state.tape = tape
    return tape


def reset_tape() -> None:
    """Drop everything recorded so far on this thread's tape."""
    current_tape().clear()


def record(
    op_kind: OpKind,
    inputs: tuple[Tensor, ...],
    data: np.ndarray,
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
    saved: dict | None = None,
) -> Tensor:
    """Wrap an op result and append its node to the tape when gradients are needed."""
    dtype = inputs[0].dtype if inputs else default_dtype()
    if data.dtype != dtype:
        data = data.astype(dtype)
    needs_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        current_tape().record(TapeNode(op_kind, inputs, saved or {}, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires_grad leaf reachable from `loss`.

    Leaves that were recorded on the tape but do not influence the loss get
    an all-zero gradient. The tape is cleared afterwards.

    Raises:
        ContractError: `loss` is not a scalar or nothing was recorded.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not tape.nodes:
        raise ContractError("backward called on an empty tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if node.output._retain:
            node.output.grad = g if g is not None else np.zeros_like(node.output.data)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi

    seen: set[int] = set()
    for node in tape.nodes:
        for t in node.inputs:
            key = id(t)
            if not t.requires_grad or key in produced or key in seen:
                continue
            seen.add(key)
            g = grads.get(key)
            t.grad = g.astype(t.dtype, copy=False) if g is not None else np.zeros_like(t.data)
    tape.clear()


from src.tensor import functional as F  # noqa: E402
