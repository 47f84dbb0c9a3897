"""Run the architecture search from a JSON config.

Loads the configured dataset, searches with progressive pruning, and writes
the checkpoint, genotype and per-epoch history to the output directory.
"""

import argparse
import logging
from pathlib import Path

from src.config import load_config, with_overrides
from src.data.loader import load_dataset
from src.search.checkpoint import load_checkpoint
from src.search.orchestrator import run_search

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)


def main() -> None:
    parser = argparse.ArgumentParser(description="Run the cell architecture search")
    parser.add_argument("--config", type=Path, default=Path("configs/desk.json"))
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=Path("runs/search"))
    parser.add_argument("--resume", type=Path, default=None, help="last.sswp of an interrupted run")
    args = parser.parse_args()

    config = load_config(args.config)
    if args.seed is not None:
        config = with_overrides(config, seed=args.seed)
    train, _ = load_dataset(config.dataset)
    resume = load_checkpoint(args.resume) if args.resume else None

    checkpoint = run_search(config, train, resume=resume, out_dir=args.out)
    logger.info("Search complete. Genotype:\n%s", checkpoint.genotype.to_text())


if __name__ == "__main__":
    main()
