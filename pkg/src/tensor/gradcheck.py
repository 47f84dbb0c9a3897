"""Central finite-difference verification of tape gradients."""

from collections.abc import Callable

import numpy as np

from src.common.errors import ContractError, NumericError
from src.tensor.core import Tensor, backward, no_grad, reset_tape


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-3) -> float:
    """Compare the analytic gradient of scalar `f` at `x` with central differences.

    `x` is perturbed in place one coordinate at a time and restored afterwards,
    so `f` may equally close over `x` (for example a module weight) and ignore
    its argument.

    Run it inside `precision(np.float64)`: in float32 rounding alone leaves
    errors around 1e-5. In float64 a plain sum with exactly representable
    inputs and `epsilon` scores 0.

    Returns:
        max over coordinates of |analytic - numeric| / max(1e-8, |numeric|).
    """
    if not x.requires_grad:
        raise ContractError("finite_diff_check needs a tensor with requires_grad=True")
    reset_tape()
    out = f(x)
    if out.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = np.array(x.grad, dtype=np.float64)

    numeric = np.empty_like(analytic)
    with no_grad():
        for idx in np.ndindex(x.shape):
            original = x.data[idx]
            x.data[idx] = original + epsilon
            plus = float(f(x).item())
            x.data[idx] = original - epsilon
            minus = float(f(x).item())
            x.data[idx] = original
            numeric[idx] = (plus - minus) / (2.0 * epsilon)
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise NumericError("non-finite value during finite-difference check")
    error = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(error.max()) if error.size else 0.0
