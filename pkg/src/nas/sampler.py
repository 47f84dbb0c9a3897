"""Path binarization: one candidate per edge per step, and the logits gradient it implies.

Weight steps mask out each zero-parameter candidate with probability `drop_p`
and renormalize softmax(alpha) over what is left, which raises the odds of the
convolutions being trained without touching alpha itself. Architecture steps
sample from the unmasked softmax.

The architecture gradient uses the binarized-gate approximation: with
p = softmax(alpha) and g_o = <dL/d(edge output), o(x)> observed only for the
sampled candidate s,

    dL/dalpha_j = g_s * p_s * (delta_sj - p_j).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from src.common.errors import ContractError, NumericError
from src.nas.genotype import Genotype
from src.nas.ops import NON_PARAMETERIZED, PRIMITIVES
from src.nas.search_space import EdgeKey, EdgeState, SuperNet, incoming_edges

logger = logging.getLogger(__name__)

PARAMETER_FREE_MASK = np.array([kind in NON_PARAMETERIZED for kind in PRIMITIVES])


class StepMode(str, Enum):
    WEIGHT = "weight_step"
    ALPHA = "alpha_step"


@dataclass(frozen=True)
class SampleDecision:
    """Chosen candidate per active edge, eligibility masks, and the seed that produced them."""

    mode: StepMode
    seed: int
    choices: dict[EdgeKey, int] = field(default_factory=dict)
    masks: dict[EdgeKey, tuple[bool, ...]] = field(default_factory=dict)


def _draw(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw that never lands on a zero-probability entry."""
    cdf = np.cumsum(probs)
    index = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    index = min(index, len(probs) - 1)
    while probs[index] == 0.0:
        index -= 1
    return index


def sample_paths(net: SuperNet, mode: StepMode | str, drop_p: float, seed: int) -> SampleDecision:
    """Choose one candidate for every active edge of `net`.

    Pruned edges always yield their retained candidate; dropped edges are absent.
    The decision is a pure function of (seed, alpha values, mode, drop_p).
    """
    mode = StepMode(mode)
    if not 0.0 <= drop_p <= 1.0:
        raise ContractError(f"drop_p must lie in [0, 1], got {drop_p}")
    rng = np.random.default_rng(seed)
    choices: dict[EdgeKey, int] = {}
    masks: dict[EdgeKey, tuple[bool, ...]] = {}
    m = len(PRIMITIVES)
    for edge in net.edges():
        if edge.dropped:
            continue
        if edge.pruned_to is not None:
            choices[edge.key] = edge.pruned_to
            masks[edge.key] = tuple(i == edge.pruned_to for i in range(m))
            continue
        eligible = np.ones(m, dtype=bool)
        if mode is StepMode.WEIGHT and drop_p > 0.0:
            dropped = rng.random(m) < drop_p
            eligible = ~(PARAMETER_FREE_MASK & dropped)
        probs = edge.probabilities() * eligible
        if probs.sum() <= 0.0:
            logger.warning("Every candidate masked on edge %s; sampling unmasked", edge.key)
            eligible = np.ones(m, dtype=bool)
            probs = edge.probabilities()
        choices[edge.key] = _draw(probs / probs.sum(), float(rng.random()))
        masks[edge.key] = tuple(bool(v) for v in eligible)
    return SampleDecision(mode=mode, seed=seed, choices=choices, masks=masks)


def decision_from_genotype(net: SuperNet, genotype: Genotype, seed: int = 0) -> SampleDecision:
    """A forced decision that activates exactly the edges and candidates of `genotype`."""
    choices: dict[EdgeKey, int] = {}
    for cell, cell_genotype in zip(net.cells, genotype.cells):
        if cell_genotype is None:
            raise ContractError(f"genotype leaves cell {cell.index} undecided")
        for node, pairs in enumerate(cell_genotype.nodes):
            kept = dict(pairs)
            for e in incoming_edges(node):
                source = cell.edges[e].source
                if source in kept:
                    choices[(cell.index, e)] = PRIMITIVES.index(kept[source])
    return SampleDecision(mode=StepMode.ALPHA, seed=seed, choices=choices)


def alpha_gradient(edge: EdgeState, decision: SampleDecision, upstream_grad_dot_output: float) -> np.ndarray:
    """Single-path estimate of dL/dalpha for one edge.

    Args:
        upstream_grad_dot_output: <dL/d(edge output), o_s(x)> for the sampled candidate s.

    Returns:
        Gradient array shaped like `edge.alpha`; all zeros for a pruned edge.
    """
    if edge.is_pruned:
        return np.zeros_like(edge.alpha.data)
    if decision.mode is not StepMode.ALPHA:
        raise ContractError("architecture gradients need a decision sampled in alpha_step mode")
    s = decision.choices[edge.key]
    p = edge.probabilities()
    onehot = np.zeros_like(p)
    onehot[s] = 1.0
    grad = upstream_grad_dot_output * p[s] * (onehot - p)
    if not np.isfinite(grad).all():
        raise NumericError(f"non-finite architecture gradient on edge {edge.key}")
    return grad.astype(edge.alpha.dtype)


def assign_alpha_gradients(net: SuperNet, decision: SampleDecision) -> None:
    """Fill `alpha.grad` on every edge from the outputs captured during the last backward."""
    captured = net.captured_outputs()
    for edge in net.edges():
        if edge.is_pruned or edge.key not in captured:
            edge.alpha.grad = np.zeros_like(edge.alpha.data)
            continue
        out = captured[edge.key]
        g = 0.0 if out.grad is None else float(np.sum(out.grad.astype(np.float64) * out.data))
        edge.alpha.grad = alpha_gradient(edge, decision, g)
