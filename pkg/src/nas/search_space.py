"""Cell DAGs, the weight-sharing supernet, mixed-edge evaluation and genotype derivation.

A cell has two input states (outputs of the two previous cells, after
preprocessing), four intermediate nodes and one output that concatenates the
intermediate nodes. Intermediate node j reads from every earlier state, which
gives 2 + 3 + 4 + 5 = 14 edges per cell. Every cell owns its own architecture
logits, so the search derives a distinct structure per cell.

An edge is evaluated in one of three ways:
  - reference mode: the softmax(alpha)-weighted sum of all candidates;
  - sampled mode: only the candidate chosen by the sampler, unscaled;
  - pruned: only the retained candidate (other candidates' weights are gone).
"""

import logging
from collections.abc import Iterator, Mapping

import numpy as np

from src.common.errors import ContractError, DimensionError, InitError
from src.nas.genotype import EDGES_PER_NODE, INTERMEDIATE_NODES, CellGenotype, Genotype
from src.nas.ops import (
    NONE_INDEX,
    PRIMITIVES,
    FactorizedReduce,
    ReLUConvBN,
    SkipConnect,
    apply_op,
    build_op,
    build_stem,
)
from src.tensor import functional as F
from src.tensor.core import Parameter, Tensor
from src.tensor.layers import Module, ModuleList

logger = logging.getLogger(__name__)

EdgeKey = tuple[int, int]

# (source state, target state) per edge, grouped by target node.
EDGE_ENDPOINTS: tuple[tuple[int, int], ...] = tuple(
    (source, node + 2) for node in range(INTERMEDIATE_NODES) for source in range(node + 2)
)
EDGES_PER_CELL = len(EDGE_ENDPOINTS)


def incoming_edges(node: int) -> list[int]:
    """Edge indices feeding intermediate node `node` (0..3), in source order."""
    return [e for e, (_, target) in enumerate(EDGE_ENDPOINTS) if target == node + 2]


class ArchParameter(Parameter):
    """Architecture logits; kept apart from operation weights by the optimizers."""

    __slots__ = ()


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = np.asarray(values, dtype=np.float64) - np.max(values)
    e = np.exp(shifted)
    return e / e.sum()


class EdgeState(Module):
    """Architecture logits and the bank of candidate operations on one edge."""

    def __init__(
        self,
        key: EdgeKey,
        source: int,
        target: int,
        channels: int,
        stride: int,
        rng: np.random.Generator,
        alpha_scale: float = 1e-3,
    ):
        super().__init__()
        self.key = key
        self.source, self.target = source, target
        self.alpha = ArchParameter(alpha_scale * rng.standard_normal(len(PRIMITIVES)))
        self.ops = ModuleList([build_op(kind, channels, stride, rng) for kind in PRIMITIVES])
        self.pruned_to: int | None = None
        self.dropped = False

    @property
    def is_pruned(self) -> bool:
        return self.pruned_to is not None or self.dropped

    def probabilities(self) -> np.ndarray:
        return _softmax(self.alpha.data)

    def retain(self, index: int) -> None:
        """Keep only candidate `index`; the other candidates' weights are discarded."""
        if self.pruned_to is not None and self.pruned_to != index:
            raise ContractError(f"edge {self.key} already pruned to {PRIMITIVES[self.pruned_to]}")
        self.pruned_to = index
        for o in range(len(self.ops)):
            if o != index:
                self.ops[o] = None

    def drop(self) -> None:
        if self.pruned_to is not None:
            raise ContractError(f"edge {self.key} is retained and cannot be dropped")
        self.dropped = True
        for o in range(len(self.ops)):
            self.ops[o] = None


def mixed_edge_forward(edge: EdgeState, x: Tensor) -> Tensor:
    """Sum over candidates of softmax(alpha)_o * o(x).

    Raises:
        ContractError: the edge has been pruned.
    """
    if edge.is_pruned:
        raise ContractError(f"edge {edge.key} is pruned; mixed evaluation needs the full bank")
    weights = F.softmax(edge.alpha, axis=0)
    total = None
    for o, op in enumerate(edge.ops):
        term = F.mul(apply_op(op, x), weights[o])
        total = term if total is None else F.add(total, term)
    return total


class Cell(Module):
    def __init__(
        self,
        index: int,
        reduction: bool,
        reduction_prev: bool,
        c_prev_prev: int,
        c_prev: int,
        channels: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.index = index
        self.reduction = reduction
        self.channels = channels
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_prev_prev, channels, rng)
        else:
            self.preprocess0 = ReLUConvBN(c_prev_prev, channels, 1, 1, 0, rng)
        self.preprocess1 = ReLUConvBN(c_prev, channels, 1, 1, 0, rng)
        self.edges = ModuleList(
            [
                EdgeState((index, e), source, target, channels, 2 if reduction and source < 2 else 1, rng)
                for e, (source, target) in enumerate(EDGE_ENDPOINTS)
            ]
        )
        self.genotype: CellGenotype | None = None
        self.activation_counts: dict[int, int] = {}
        self.edge_outputs: dict[int, Tensor] = {}

    @property
    def is_pruned(self) -> bool:
        return self.genotype is not None

    def forward(
        self,
        s0: Tensor,
        s1: Tensor,
        choices: Mapping[EdgeKey, int] | None = None,
        capture: bool = False,
        drop_path_prob: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Evaluate the cell.

        Args:
            choices: Sampled candidate per edge key. None selects reference
                (mixture) mode for unpruned edges. In sampled mode an unpruned
                edge absent from `choices` is inactive.
            capture: Keep the gradient of every sampled edge output for the
                architecture-gradient estimator.
            drop_path_prob: Per-sample drop probability on non-identity edges
                while training.
        """
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        self.activation_counts = {}
        self.edge_outputs = {}
        for node in range(INTERMEDIATE_NODES):
            total = None
            for e in incoming_edges(node):
                edge = self.edges[e]
                if edge.dropped:
                    continue
                x = states[edge.source]
                if edge.pruned_to is not None:
                    op = edge.ops[edge.pruned_to]
                    out = apply_op(op, x)
                    self.activation_counts[e] = 1
                elif choices is None:
                    op = None
                    out = mixed_edge_forward(edge, x)
                    self.activation_counts[e] = len(PRIMITIVES)
                elif edge.key in choices:
                    op = edge.ops[choices[edge.key]]
                    out = apply_op(op, x)
                    self.activation_counts[e] = 1
                    if capture:
                        if out is x:
                            out = F.scalar_mul(x, 1.0)
                        self.edge_outputs[e] = out.retain_grad()
                else:
                    continue
                if drop_path_prob > 0.0 and self.training and not _is_identity(op):
                    out = F.drop_path(out, drop_path_prob, rng)
                total = out if total is None else F.add(total, out)
            if total is None:
                raise ContractError(f"cell {self.index} node {node} has no active incoming edge")
            states.append(total)
        return F.concat(states[2:], axis=1)


def _is_identity(op) -> bool:
    return isinstance(op, SkipConnect) and op.stride == 1


class SuperNet(Module):
    """Stem followed by L cells, each with independent architecture logits.

    Reduction cells sit at floor(L/3) and floor(2L/3) and double the width.
    `forward` returns the last cell's feature map; heads live outside.
    """

    def __init__(
        self,
        cells: int,
        init_channels: int,
        num_classes: int,
        input_shape: tuple[int, int, int],
        rng: np.random.Generator,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        in_channels = input_shape[0]
        self.stem = build_stem(in_channels, init_channels, rng)
        reductions = {cells // 3, 2 * cells // 3}
        c_prev_prev, c_prev, c = 3 * init_channels, 3 * init_channels, init_channels
        built = []
        reduction_prev = False
        for i in range(cells):
            reduction = i in reductions
            if reduction:
                c *= 2
            built.append(Cell(i, reduction, reduction_prev, c_prev_prev, c_prev, c, rng))
            reduction_prev = reduction
            c_prev_prev, c_prev = c_prev, INTERMEDIATE_NODES * c
        self.cells = ModuleList(built)
        self.feature_dim = c_prev

    @property
    def reduction_flags(self) -> list[bool]:
        return [cell.reduction for cell in self.cells]

    def forward(
        self,
        x: Tensor,
        choices: Mapping[EdgeKey, int] | None = None,
        capture: bool = False,
        drop_path_prob: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"network expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, choices, capture, drop_path_prob, rng)
        return s1

    def edges(self) -> Iterator[EdgeState]:
        for cell in self.cells:
            yield from cell.edges

    def named_weight_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, p in self.named_parameters():
            if not isinstance(p, ArchParameter):
                yield name, p

    def named_arch_parameters(self) -> Iterator[tuple[str, ArchParameter]]:
        for name, p in self.named_parameters():
            if isinstance(p, ArchParameter):
                yield name, p

    def num_parameters(self) -> int:
        """Operation weight count; architecture logits are excluded."""
        return int(sum(p.size for _, p in self.named_weight_parameters()))

    def activation_counts(self) -> dict[EdgeKey, int]:
        """Candidate evaluations per edge during the most recent forward pass."""
        return {(cell.index, e): n for cell in self.cells for e, n in cell.activation_counts.items()}

    def captured_outputs(self) -> dict[EdgeKey, Tensor]:
        return {(cell.index, e): out for cell in self.cells for e, out in cell.edge_outputs.items()}


def build_network(
    cells: int,
    init_channels: int,
    num_classes: int,
    input_shape: tuple[int, int, int],
    rng: np.random.Generator | int = 0,
) -> SuperNet:
    """Assemble an unpruned supernet.

    Raises:
        ContractError: fewer than two cells.
        DimensionError: the input cannot be halved twice by the reduction cells.
    """
    if cells < 2:
        raise ContractError(f"a network needs at least 2 cells, got {cells}")
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise DimensionError(f"input shape must be (channels, height, width), got {input_shape}")
    _, h, w = input_shape
    if h % 4 or w % 4:
        raise DimensionError(f"input height and width must be divisible by 4, got {h}x{w}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    net = SuperNet(cells, init_channels, num_classes, input_shape, rng)
    logger.info(
        "Built network: %d cells, C=%d, %d edges, %d weights",
        cells,
        init_channels,
        cells * EDGES_PER_CELL,
        net.num_parameters(),
    )
    return net


def derive_edge(edge: EdgeState) -> int:
    """Index of the strongest non-`none` candidate; ties go to the lowest index."""
    if edge.pruned_to is not None:
        return edge.pruned_to
    alpha = np.asarray(edge.alpha.data, dtype=np.float64)
    masked = np.where(np.arange(len(alpha)) == NONE_INDEX, -np.inf, alpha)
    return int(np.argmax(masked))


def edge_strength(edge: EdgeState) -> float:
    """Largest softmax weight among the non-`none` candidates."""
    probs = edge.probabilities()
    probs[NONE_INDEX] = -np.inf
    return float(probs.max())


def derive_cell(cell: Cell) -> CellGenotype:
    """Keep the two strongest incoming edges per node, each with its best candidate."""
    if cell.genotype is not None:
        return cell.genotype
    nodes = []
    for node in range(INTERMEDIATE_NODES):
        incoming = incoming_edges(node)
        strengths = [edge_strength(cell.edges[e]) for e in incoming]
        ranked = sorted(range(len(incoming)), key=lambda i: -strengths[i])[:EDGES_PER_NODE]
        nodes.append(
            tuple(
                (cell.edges[incoming[i]].source, PRIMITIVES[derive_edge(cell.edges[incoming[i]])])
                for i in ranked
            )
        )
    return CellGenotype(cell.reduction, tuple(nodes))


def prune_cell(cell: Cell, genotype: CellGenotype | None = None) -> CellGenotype:
    """Reduce a cell to its compact form in place, keeping the retained weights untouched.

    Args:
        genotype: Structure to prune to; derived from the cell's logits when omitted.
    """
    if genotype is None:
        genotype = derive_cell(cell)
    if cell.genotype is not None:
        if cell.genotype != genotype:
            raise ContractError(f"cell {cell.index} is already pruned to a different structure")
        return genotype
    if genotype.reduction != cell.reduction:
        raise InitError(
            f"cell {cell.index} reduction={cell.reduction} but genotype says {genotype.reduction}"
        )
    for node, pairs in enumerate(genotype.nodes):
        kept = dict(pairs)
        for e in incoming_edges(node):
            edge = cell.edges[e]
            if edge.source in kept:
                edge.retain(PRIMITIVES.index(kept[edge.source]))
            else:
                edge.drop()
    cell.genotype = genotype
    logger.info("Pruned cell %d: %s", cell.index, genotype.pairs())
    return genotype


def derive_genotype(net: SuperNet) -> Genotype:
    """Compact genotype of the whole network (pruned cells keep their stored structure)."""
    return Genotype(tuple(derive_cell(cell) for cell in net.cells))


def current_genotype(net: SuperNet) -> Genotype:
    """Genotype so far: pruned cells filled in, unpruned cells left as None."""
    return Genotype(tuple(cell.genotype for cell in net.cells))


def apply_genotype(net: SuperNet, genotype: Genotype) -> SuperNet:
    """Prune each cell the genotype specifies.

    Raises:
        InitError: the genotype describes a different number of cells.
    """
    if len(genotype.cells) != len(net.cells):
        raise InitError(f"genotype has {len(genotype.cells)} cells, network has {len(net.cells)}")
    for cell, cell_genotype in zip(net.cells, genotype.cells):
        if cell_genotype is not None:
            prune_cell(cell, cell_genotype)
    return net
