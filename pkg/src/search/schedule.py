"""The three-phase search timeline: warm-up, joint bi-level updates, progressive prune.

    epochs [0, warmup_end)          warm-up: weight steps only
    epochs [warmup_end, fpp_start)  joint: alternating alpha and weight steps
    epochs [fpp_start, max_epochs)  prune: as joint, and one cell is derived
                                    every T_step epochs

Cell k in prune order is derived at the start of epoch
fpp_start + floor(k * T_step) with T_step = max_epochs * r3 / L.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import pandas as pd

from src.common.errors import ConfigError

logger = logging.getLogger(__name__)

# Absorbs float error in k * T_step when the product is a whole number.
FLOOR_EPS = 1e-9


class Phase(str, Enum):
    WARMUP = "warmup"
    JOINT = "joint"
    PRUNE = "prune"


class PruneDirection(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    NONE = "none"


@dataclass(frozen=True)
class PhaseSchedule:
    max_epochs: int
    ratios: tuple[float, float, float]
    cells: int
    direction: PruneDirection
    warmup_end: int
    fpp_start: int
    prune_epochs: tuple[int, ...]
    prune_order: tuple[int, ...]

    @property
    def t_step(self) -> float:
        return t_step(self.max_epochs, self.ratios[2], self.cells)

    def phase_at(self, epoch: int) -> Phase:
        if epoch < self.warmup_end:
            return Phase.WARMUP
        if epoch < self.fpp_start:
            return Phase.JOINT
        return Phase.PRUNE

    def prune_events(self, epoch: int) -> list[int]:
        """Cells to derive at the start of `epoch`, in prune order."""
        return [cell for e, cell in zip(self.prune_epochs, self.prune_order) if e == epoch]

    def to_frame(self) -> pd.DataFrame:
        """One row per prune event."""
        return pd.DataFrame(
            {"order": range(len(self.prune_order)), "cell": self.prune_order, "epoch": self.prune_epochs}
        )

    def summary(self) -> dict:
        return {
            "max_epochs": self.max_epochs,
            "ratios": list(self.ratios),
            "cells": self.cells,
            "direction": self.direction.value,
            "warmup_end": self.warmup_end,
            "fpp_start": self.fpp_start,
            "t_step": self.t_step,
            "prune_epochs": list(self.prune_epochs),
            "prune_order": list(self.prune_order),
        }


def t_step(max_epochs: int, prune_ratio: float, cells: int) -> float:
    """Epochs between two adjacent prune events."""
    return max_epochs * prune_ratio / cells


def _boundary(value: float, rounding: str) -> int:
    # Half-up rounding; Python's round() would send 0.5 to the even neighbour.
    return math.floor(value + FLOOR_EPS) if rounding == "floor" else math.floor(value + 0.5)


def build_schedule(
    max_epochs: int,
    ratios: tuple[float, float, float],
    cells: int,
    direction: PruneDirection | str = PruneDirection.FORWARD,
    rounding: str = "round",
) -> PhaseSchedule:
    """Compute phase boundaries and prune epochs.

    Raises:
        ConfigError: invalid ratios, fewer than one cell or epoch, or a zero
            prune ratio combined with a prune direction.
    """
    direction = PruneDirection(direction)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"phase ratios must be three nonnegative numbers summing to 1, got {ratios}")
    if cells < 1 or max_epochs < 1:
        raise ConfigError(f"need at least one cell and one epoch, got cells={cells} max_epochs={max_epochs}")
    if rounding not in ("round", "floor"):
        raise ConfigError(f"unknown rounding mode {rounding!r}")
    warmup_end = _boundary(ratios[0] * max_epochs, rounding)
    fpp_start = _boundary((ratios[0] + ratios[1]) * max_epochs, rounding)

    if direction is PruneDirection.NONE:
        epochs: tuple[int, ...] = ()
        order: tuple[int, ...] = ()
    else:
        if ratios[2] == 0:
            raise ConfigError("prune ratio is 0 but prune direction is not 'none'")
        step = t_step(max_epochs, ratios[2], cells)
        epochs = tuple(fpp_start + math.floor(k * step + FLOOR_EPS) for k in range(cells))
        order = tuple(range(cells)) if direction is PruneDirection.FORWARD else tuple(reversed(range(cells)))
        if epochs[-1] >= max_epochs:
            raise ConfigError(
                f"last prune event at epoch {epochs[-1]} falls outside {max_epochs} epochs; "
                "use more epochs or a larger prune ratio"
            )
    schedule = PhaseSchedule(max_epochs, ratios, cells, direction, warmup_end, fpp_start, epochs, order)
    logger.debug("Schedule: %s", schedule.summary())
    return schedule
