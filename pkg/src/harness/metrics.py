"""Accuracy metrics, per-run results and multi-seed reports."""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from src.common.errors import ContractError

logger = logging.getLogger(__name__)

AGGREGATE_COLUMNS = ["init", "fraction", "lr", "n", "top1_mean", "top1_std", "top5_mean", "top5_std"]


def relative_gain(acc_f_with: float, acc_s_with: float, acc_f_without: float, acc_s_without: float) -> float:
    """(fine-tune - scratch) with the ablation target, minus the same without it."""
    for acc in (acc_f_with, acc_s_with, acc_f_without, acc_s_without):
        if not 0.0 <= acc <= 1.0:
            raise ContractError(f"accuracies must lie in [0, 1], got {acc}")
    return (acc_f_with - acc_s_with) - (acc_f_without - acc_s_without)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of rows whose label is among the k largest logits (k capped at the class count)."""
    if len(labels) == 0:
        return 0.0
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((top == labels[:, None]).any(axis=1).mean())


@dataclass
class RunResult:
    seed: int
    init: str
    fraction: float
    top1: float
    top5: float
    test_loss: float
    lr: float
    epochs: int
    config_hash: str
    loss_curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.top1 <= 1.0 and 0.0 <= self.top5 <= 1.0):
            raise ContractError(f"accuracies out of range: top1={self.top1} top5={self.top5}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    runs: list[RunResult] = field(default_factory=list)

    @property
    def top1(self) -> float:
        """Mean top-1 accuracy over the runs."""
        return float(np.mean([r.top1 for r in self.runs])) if self.runs else float("nan")

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.runs.extend(other.runs)
        return self

    def frame(self) -> pd.DataFrame:
        columns = ["seed", "init", "fraction", "top1", "top5", "test_loss", "lr", "epochs", "config_hash"]
        return pd.DataFrame([{c: getattr(r, c) for c in columns} for r in self.runs], columns=columns)

    def aggregate(self) -> pd.DataFrame:
        """Mean and sample standard deviation per (init, fraction, lr) over completed runs."""
        frame = self.frame()
        if frame.empty:
            return pd.DataFrame(columns=AGGREGATE_COLUMNS)
        grouped = frame.groupby(["init", "fraction", "lr"], sort=True)
        out = grouped.agg(
            n=("top1", "size"),
            top1_mean=("top1", "mean"),
            top1_std=("top1", "std"),
            top5_mean=("top5", "mean"),
            top5_std=("top5", "std"),
        ).reset_index()
        return out.fillna({"top1_std": 0.0, "top5_std": 0.0})

    def to_text(self) -> str:
        """One JSON document with every run and the aggregate rows."""
        payload = {
            "runs": [r.to_dict() for r in self.runs],
            "aggregate": json.loads(self.aggregate().to_json(orient="records")),
        }
        return json.dumps(payload, indent=2, sort_keys=True)
