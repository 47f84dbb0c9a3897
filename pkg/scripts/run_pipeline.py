"""Desk-scale experiment: search, then compare initializations downstream.

Pipeline stages:
  1. Self-supervised search with forward progressive pruning
     (scripts/run_search.py runs this stage alone).

  2. Fine-tune the searched genotype from its concomitant weights and from a
     random init at every labeled fraction, over several seeds.

  3. Fine-tune random genotypes from a random init as the architecture
     baseline.

  4. Linear probe of the concomitant weights against random weights.

  5. Dropout ablation: search again with drop_p=0 and report the relative
     gain of the non-parameterized dropout on the concomitant weights.

Results are written as JSON and CSV tables next to the search artifacts.
"""

import argparse
import json
import logging
from pathlib import Path

from src.config import load_config, with_overrides
from src.data.loader import load_dataset
from src.harness.metrics import EvalReport, relative_gain
from src.harness.train import InitMode, label_fraction_sweep, linear_probe, train_supervised
from src.nas.genotype import random_genotype
from src.search.orchestrator import run_search

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)

ABLATION_FRACTION = 0.5


def finetune_gap(config, checkpoint, train, test, seeds) -> tuple[float, float]:
    """Mean top-1 of (concomitant fine-tune, scratch) for one searched checkpoint."""
    _, report = label_fraction_sweep(
        config,
        checkpoint.genotype,
        train,
        test,
        fractions=(ABLATION_FRACTION,),
        seeds=seeds,
        weights=checkpoint.section("net"),
    )
    means = report.frame().groupby("init")["top1"].mean()
    return float(means["concomitant"]), float(means["random"])


def main() -> None:
    parser = argparse.ArgumentParser(description="Search and evaluate at desk scale")
    parser.add_argument("--config", type=Path, default=Path("configs/desk.json"))
    parser.add_argument("--out", type=Path, default=Path("runs/pipeline"))
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--fractions", type=float, nargs="+", default=[1.0, 0.1])
    parser.add_argument("--skip-ablation", action="store_true")
    args = parser.parse_args()
    seeds = range(args.seeds)

    config = load_config(args.config)
    train, test = load_dataset(config.dataset)

    logger.info("=== Stage 1: search ===")
    checkpoint = run_search(config, train, out_dir=args.out / "search")
    genotype, weights = checkpoint.genotype, checkpoint.section("net")

    logger.info("=== Stage 2: fine-tune the searched genotype ===")
    table, report = label_fraction_sweep(
        config, genotype, train, test, fractions=args.fractions, seeds=seeds, weights=weights
    )
    table.to_csv(args.out / "fraction_sweep.csv", index=False)
    (args.out / "fraction_sweep.json").write_text(report.to_text())
    logger.info("Fraction sweep:\n%s", table.to_string(index=False))

    logger.info("=== Stage 3: random-genotype baseline ===")
    baseline = EvalReport()
    for seed in seeds:
        random_arch = random_genotype([c.reduction for c in genotype.cells], seed + 1000)
        baseline.extend(
            train_supervised(
                random_arch, InitMode.RANDOM, 1.0, config.train.epochs, config, train, test, seed=seed
            )
        )
    frame = report.frame()
    full = frame[(frame["init"] == "random") & (frame["fraction"] == max(args.fractions))]
    searched_top1 = float(full["top1"].mean())
    logger.info(
        "Searched genotype %.4f vs random genotype %.4f (top-1, random init)", searched_top1, baseline.top1
    )

    logger.info("=== Stage 4: linear probe ===")
    probe_concomitant = linear_probe(weights, genotype, train, test, config)
    probe_random = linear_probe(None, genotype, train, test, config)

    summary = {
        "genotype": json.loads(genotype.to_text()),
        "searched_top1": searched_top1,
        "random_genotype_top1": baseline.top1,
        "probe_concomitant": probe_concomitant,
        "probe_random": probe_random,
    }

    if not args.skip_ablation:
        logger.info("=== Stage 5: dropout ablation ===")
        with_dropout = finetune_gap(config, checkpoint, train, test, seeds)
        ablated_config = with_overrides(config, search={"drop_p": 0.0})
        ablated = run_search(ablated_config, train, out_dir=args.out / "search_no_dropout")
        without_dropout = finetune_gap(ablated_config, ablated, train, test, seeds)
        summary["dropout_relative_gain"] = relative_gain(*with_dropout, *without_dropout)
        logger.info("Relative gain of dropout: %+.4f", summary["dropout_relative_gain"])

    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    logger.info("Pipeline complete. Summary written to %s", args.out / "summary.json")


if __name__ == "__main__":
    main()
