"""Discrete architectures: per-cell lists of retained (predecessor, operation) pairs.

A genotype is stored as JSON text so it can be embedded in checkpoints and
diffed by hand:

    {"cells": [{"reduction": false,
                "nodes": [[[1, "sep_conv_3x3"], [0, "skip_connect"]], ...]},
               null, ...]}

A `null` cell is one the search has not pruned yet.
"""

import json
from dataclasses import dataclass

import numpy as np

from src.common.errors import ContractError
from src.nas.ops import PRIMITIVES

INTERMEDIATE_NODES = 4
EDGES_PER_NODE = 2


@dataclass(frozen=True)
class CellGenotype:
    reduction: bool
    nodes: tuple[tuple[tuple[int, str], ...], ...]

    def __post_init__(self):
        if len(self.nodes) != INTERMEDIATE_NODES:
            raise ContractError(f"a cell genotype has {INTERMEDIATE_NODES} nodes, got {len(self.nodes)}")
        for j, node in enumerate(self.nodes):
            if len(node) != EDGES_PER_NODE:
                raise ContractError(f"node {j} must keep {EDGES_PER_NODE} edges, got {len(node)}")
            if len({pred for pred, _ in node}) != len(node):
                raise ContractError(f"node {j} repeats a predecessor")
            for pred, op in node:
                if not 0 <= pred < j + 2:
                    raise ContractError(f"node {j} cannot read from state {pred}")
                if op == "none" or op not in PRIMITIVES:
                    raise ContractError(f"node {j} retains invalid operation {op!r}")

    def pairs(self) -> list[tuple[int, str]]:
        return [pair for node in self.nodes for pair in node]

    def to_dict(self) -> dict:
        return {"reduction": self.reduction, "nodes": [[list(p) for p in node] for node in self.nodes]}

    @classmethod
    def from_dict(cls, data: dict) -> "CellGenotype":
        nodes = tuple(tuple((int(pred), str(op)) for pred, op in node) for node in data["nodes"])
        return cls(reduction=bool(data["reduction"]), nodes=nodes)


@dataclass(frozen=True)
class Genotype:
    cells: tuple[CellGenotype | None, ...]

    @property
    def is_complete(self) -> bool:
        return all(cell is not None for cell in self.cells)

    def to_text(self) -> str:
        payload = {"cells": [cell.to_dict() if cell is not None else None for cell in self.cells]}
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "Genotype":
        payload = json.loads(text)
        return cls(tuple(CellGenotype.from_dict(c) if c is not None else None for c in payload["cells"]))


def random_genotype(reduction_flags: list[bool], seed: int) -> Genotype:
    """Draw a valid genotype uniformly: two distinct predecessors and a non-`none` op per node."""
    rng = np.random.default_rng(seed)
    ops = [p for p in PRIMITIVES if p != "none"]
    cells = []
    for reduction in reduction_flags:
        nodes = []
        for j in range(INTERMEDIATE_NODES):
            preds = sorted(rng.choice(j + 2, size=EDGES_PER_NODE, replace=False).tolist())
            nodes.append(tuple((int(p), ops[int(rng.integers(len(ops)))]) for p in preds))
        cells.append(CellGenotype(reduction, tuple(nodes)))
    return Genotype(tuple(cells))
