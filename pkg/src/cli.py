"""Command-line surface: search, train, probe, pretrain, export, inspect.

Exit codes: 0 success, 1 configuration or usage error, 2 any other failure.
Every subcommand that writes outputs also writes `resolved_config.json`
(defaults filled in) to its output directory.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from src.common.errors import ConfigError, NasError
from src.config import RunConfig, config_from_dict, dump_config, load_config, with_overrides
from src.data.loader import load_dataset
from src.harness.train import InitMode, linear_probe, train_supervised, two_stage_pretrain
from src.nas.genotype import Genotype, random_genotype
from src.search.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.search.orchestrator import history_from_checkpoint, run_search
from src.search.schedule import build_schedule

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--resume", type=Path, help="checkpoint to resume from or evaluate")
    common.add_argument("--verbose", action="store_true", help="log at DEBUG level")

    parser = _Parser(prog="cellsearch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("search", parents=[common], help="run the architecture search")

    genotype_args = argparse.ArgumentParser(add_help=False)
    genotype_args.add_argument("--genotype", type=Path, help="genotype JSON (default: the one in --resume)")
    genotype_args.add_argument(
        "--random-genotype", action="store_true", help="draw a random genotype from --seed"
    )

    train = sub.add_parser("train", parents=[common, genotype_args], help="fine-tune a derived architecture")
    train.add_argument("--init", choices=[m.value for m in InitMode], help="weight initialization")
    train.add_argument("--fraction", type=float, help="labeled fraction in (0, 1]")
    train.add_argument("--epochs", type=int, help="fine-tuning epochs")
    train.add_argument("--lr", type=float, help="learning rate override")

    probe = sub.add_parser("probe", parents=[common, genotype_args], help="linear probe on frozen features")
    probe.add_argument("--init", choices=["random", "concomitant"], default="concomitant")

    pretrain = sub.add_parser("pretrain", parents=[common, genotype_args], help="contrastive pre-training")
    pretrain.add_argument("--epochs", type=int, help="pre-training epochs")

    sub.add_parser("export", parents=[common], help="write a checkpoint's genotype and weight manifest")
    sub.add_parser("inspect", parents=[common], help="print the phase schedule without running")
    return parser


def checkpoint_config(checkpoint: Checkpoint) -> RunConfig:
    try:
        return config_from_dict(json.loads(checkpoint.config_text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint config is not valid JSON: {exc}") from exc


def resolve_config(args: argparse.Namespace, checkpoint: Checkpoint | None = None) -> RunConfig:
    """--config, else the config stored in the --resume checkpoint, else the defaults.

    Raises:
        ConfigError: --config and the checkpoint disagree on the network section.
    """
    if args.config:
        config = load_config(args.config)
        if checkpoint is not None:
            stored = checkpoint_config(checkpoint)
            if stored.network != config.network:
                raise ConfigError(
                    f"--config network {config.network.model_dump()} does not match the checkpoint's "
                    f"{stored.network.model_dump()}"
                )
    elif checkpoint is not None:
        config = checkpoint_config(checkpoint)
        logger.info("Using the configuration stored in %s", args.resume)
    else:
        config = RunConfig()
    if args.seed is not None:
        config = with_overrides(config, seed=args.seed)
    return config


def write_resolved_config(config: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(dump_config(config))


def resolve_genotype(args: argparse.Namespace, config: RunConfig, checkpoint: Checkpoint | None) -> Genotype:
    if getattr(args, "random_genotype", False):
        cells = config.network.cells
        flags = [i in {cells // 3, 2 * cells // 3} for i in range(cells)]
        return random_genotype(flags, config.seed)
    if getattr(args, "genotype", None):
        try:
            return Genotype.from_text(args.genotype.read_text())
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"malformed genotype file {args.genotype}: {exc}") from exc
    if checkpoint is None:
        raise ConfigError("give --resume CHECKPOINT, --genotype PATH or --random-genotype")
    return checkpoint.genotype


def cmd_search(args: argparse.Namespace, config: RunConfig, checkpoint: Checkpoint | None) -> None:
    write_resolved_config(config, args.out)
    train, _ = load_dataset(config.dataset)
    result = run_search(config, train, resume=checkpoint, out_dir=args.out)
    print(result.genotype.to_text())


def cmd_train(args: argparse.Namespace, config: RunConfig, checkpoint: Checkpoint | None) -> None:
    overrides = {}
    if args.init:
        overrides["init"] = args.init
    if args.fraction is not None:
        overrides["labeled_fraction"] = args.fraction
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        config = with_overrides(config, train=overrides)
    write_resolved_config(config, args.out)
    genotype = resolve_genotype(args, config, checkpoint)
    weights = checkpoint.section("net") if checkpoint is not None else None
    train, test = load_dataset(config.dataset)
    t = config.train
    report = train_supervised(
        genotype, t.init, t.labeled_fraction, t.epochs, config, train, test, weights, lr=args.lr
    )
    (args.out / "report.json").write_text(report.to_text())
    print(report.aggregate().to_string(index=False))


def cmd_probe(args: argparse.Namespace, config: RunConfig, checkpoint: Checkpoint | None) -> None:
    write_resolved_config(config, args.out)
    genotype = resolve_genotype(args, config, checkpoint)
    if args.init == "concomitant" and checkpoint is None:
        raise ConfigError("probing concomitant weights needs --resume CHECKPOINT")
    weights = checkpoint.section("net") if args.init == "concomitant" else None
    train, test = load_dataset(config.dataset)
    accuracy = linear_probe(weights, genotype, train, test, config)
    (args.out / "probe.json").write_text(json.dumps({"init": args.init, "accuracy": accuracy}, indent=2))
    print(f"probe accuracy={accuracy:.4f}")


def cmd_pretrain(args: argparse.Namespace, config: RunConfig, checkpoint: Checkpoint | None) -> None:
    if args.epochs is not None:
        config = with_overrides(config, train={"pretrain_epochs": args.epochs})
    write_resolved_config(config, args.out)
    genotype = resolve_genotype(args, config, checkpoint)
    train, _ = load_dataset(config.dataset)
    result = two_stage_pretrain(genotype, config.train.pretrain_epochs, config, train)
    arrays = {f"net/{k}": v for k, v in result.weights.items()}
    arrays["state/history/ssl_loss"] = np.array(result.losses, dtype=np.float64)
    save_checkpoint(Checkpoint(dump_config(config), genotype, arrays), args.out / "pretrain.sswp")


def cmd_export(args: argparse.Namespace, config: RunConfig, checkpoint: Checkpoint | None) -> None:
    if checkpoint is None:
        raise ConfigError("export needs --resume CHECKPOINT")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "genotype.json").write_text(checkpoint.genotype.to_text())
    manifest = pd.DataFrame(
        [
            {"name": name, "dtype": str(a.dtype), "shape": "x".join(map(str, a.shape)), "size": int(a.size)}
            for name, a in sorted(checkpoint.arrays.items())
        ]
    )
    manifest.to_csv(args.out / "manifest.csv", index=False)
    history = history_from_checkpoint(checkpoint)
    if not history.empty:
        history.to_csv(args.out / "history.csv", index_label="epoch")
    print(checkpoint.genotype.to_text())
    print(f"{len(manifest)} arrays, {int(manifest['size'].sum()) if len(manifest) else 0} values")


def cmd_inspect(args: argparse.Namespace, config: RunConfig, checkpoint: Checkpoint | None) -> None:
    s = config.search
    schedule = build_schedule(s.max_epochs, s.ratios, config.network.cells, s.prune_direction, s.rounding)
    print(f"max_epochs={schedule.max_epochs} ratios={list(schedule.ratios)} cells={schedule.cells}")
    print(f"warmup_end={schedule.warmup_end}")
    print(f"fpp_start={schedule.fpp_start}")
    print(f"t_step={schedule.t_step:g}")
    print(f"prune_direction={schedule.direction.value}")
    print(f"prune_epochs={list(schedule.prune_epochs)} ({len(schedule.prune_epochs)} events)")
    if schedule.prune_epochs:
        print(schedule.to_frame().to_string(index=False))


COMMANDS = {
    "search": cmd_search,
    "train": cmd_train,
    "probe": cmd_probe,
    "pretrain": cmd_pretrain,
    "export": cmd_export,
    "inspect": cmd_inspect,
}


def cli(argv: list[str] | None = None) -> int:
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        checkpoint = load_checkpoint(args.resume) if args.resume else None
        config = resolve_config(args, checkpoint)
        COMMANDS[args.command](args, config, checkpoint)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        return 1
    except NasError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return 2
    return 0


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
