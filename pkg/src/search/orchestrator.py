"""The search loop: warm-up, joint alternating updates, progressive prune.

Every epoch starts by firing the schedule's prune events, then runs its
batches. Warm-up epochs run weight steps only. Later epochs run iteration
pairs: one architecture step on a validation batch (no dropout), then one
weight step on a training batch (non-parameterized dropout `drop_p`).

Seeds are derived from the run seed: [seed, 0] initializes the network and
head, [seed, 1] splits the data, and [seed, 2] seeds the loop generator that
shuffles batches and hands out one seed per sampling decision. The loop
generator's state is checkpointed, so a resumed search continues the exact
sequence.
"""

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from src.common.errors import CheckpointError, ConfigError, NumericError, SearchDivergedError
from src.config import RunConfig, dump_config
from src.data.dataset import Dataset, iterate_batches, num_batches, split
from src.nas.genotype import Genotype
from src.nas.ops import Classifier, ProjectionNeck, build_classifier, build_projection
from src.nas.sampler import StepMode, assign_alpha_gradients, sample_paths
from src.nas.search_space import (
    SuperNet,
    apply_genotype,
    build_network,
    current_genotype,
    derive_genotype,
    prune_cell,
)
from src.search.checkpoint import Checkpoint, save_checkpoint
from src.search.optim import SGD, Adam, check_finite_grads, clip_grad_norm, cosine_lr, zero_grad
from src.search.schedule import Phase, PhaseSchedule, build_schedule
from src.ssl.objective import sl_forward, ssl_forward
from src.tensor.core import Tensor, backward, reset_tape

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "search.sswp"
LAST_CHECKPOINT_NAME = "last.sswp"
DIVERGED_CHECKPOINT_NAME = "diverged.sswp"
HISTORY_COLUMNS = ("lr", "w_loss", "alpha_loss")


def generator_state(rng: np.random.Generator) -> np.ndarray:
    """PCG64 state as six u64 words: state hi/lo, increment hi/lo, has_uint32, uinteger."""
    s = rng.bit_generator.state
    mask = (1 << 64) - 1
    inner = s["state"]
    return np.array(
        [
            inner["state"] >> 64,
            inner["state"] & mask,
            inner["inc"] >> 64,
            inner["inc"] & mask,
            s["has_uint32"],
            s["uinteger"],
        ],
        dtype=np.uint64,
    )


def restore_generator(words: np.ndarray) -> np.random.Generator:
    w = [int(v) for v in words]
    if len(w) != 6:
        raise CheckpointError(f"generator state needs 6 words, got {len(w)}")
    bit_generator = np.random.PCG64()
    bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return np.random.Generator(bit_generator)


def build_head(config: RunConfig, net: SuperNet, rng: np.random.Generator) -> ProjectionNeck | Classifier:
    """Projection neck for the contrastive objective, linear classifier for the supervised one."""
    if config.search.objective == "ssl":
        hidden, out = config.network.projection_hidden, config.network.projection_out
        return build_projection(net.feature_dim, hidden, out, rng)
    return build_classifier(net.feature_dim, net.num_classes, rng)


@dataclass
class SearchState:
    config: RunConfig
    net: SuperNet
    head: ProjectionNeck | Classifier
    schedule: PhaseSchedule
    w_optim: SGD
    alpha_optim: Adam
    rng: np.random.Generator
    epoch: int = 0
    history: dict[str, list[float]] = field(default_factory=lambda: {c: [] for c in HISTORY_COLUMNS})

    def weight_params(self) -> list:
        return list(self.net.named_weight_parameters()) + [
            (f"head.{n}", p) for n, p in self.head.named_parameters()
        ]

    def open_alpha_params(self) -> list:
        """Logits of edges that are still being searched."""
        return [(f"{e.key[0]}.{e.key[1]}", e.alpha) for e in self.net.edges() if not e.is_pruned]

    def all_params(self) -> list:
        return self.weight_params() + list(self.net.named_arch_parameters())

    def history_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.history)
        frame.insert(0, "epoch", range(len(frame)))
        frame.insert(1, "phase", [self.schedule.phase_at(e).value for e in frame["epoch"]])
        pruned = [sum(1 for ep in self.schedule.prune_epochs if ep <= e) for e in frame["epoch"]]
        frame["pruned_cells"] = pruned
        return frame


def init_search_state(config: RunConfig, input_shape: tuple[int, int, int], num_classes: int) -> SearchState:
    init_rng = np.random.default_rng([config.seed, 0])
    n = config.network
    net = build_network(n.cells, n.init_channels, num_classes, input_shape, init_rng)
    head = build_head(config, net, init_rng)
    s = config.search
    schedule = build_schedule(s.max_epochs, s.ratios, config.network.cells, s.prune_direction, s.rounding)
    o = config.optim
    return SearchState(
        config=config,
        net=net,
        head=head,
        schedule=schedule,
        w_optim=SGD(o.w_lr, o.w_momentum, o.w_weight_decay),
        alpha_optim=Adam(o.alpha_lr, o.alpha_betas, weight_decay=o.alpha_weight_decay),
        rng=np.random.default_rng([config.seed, 2]),
    )


def state_to_checkpoint(state: SearchState) -> Checkpoint:
    arrays = {f"net/{k}": v for k, v in state.net.state_dict().items()}
    arrays.update({f"head/{k}": v for k, v in state.head.state_dict().items()})
    arrays.update({f"optim/w/{k}": v for k, v in state.w_optim.state_dict().items()})
    arrays.update({f"optim/alpha/{k}": v for k, v in state.alpha_optim.state_dict().items()})
    arrays["state/epoch"] = np.array([state.epoch], dtype=np.int64)
    arrays["state/rng"] = generator_state(state.rng)
    for column, values in state.history.items():
        arrays[f"state/history/{column}"] = np.array(values, dtype=np.float64)
    return Checkpoint(dump_config(state.config), current_genotype(state.net), arrays)


def restore_search_state(
    config: RunConfig, checkpoint: Checkpoint, input_shape: tuple[int, int, int], num_classes: int
) -> SearchState:
    """Rebuild the supernet, prune it to the stored genotype-so-far and load every array."""
    if checkpoint.config_text != dump_config(config):
        logger.warning("Resuming with a configuration that differs from the checkpoint's")
    state = init_search_state(config, input_shape, num_classes)
    apply_genotype(state.net, checkpoint.genotype)
    state.net.load_state_dict(checkpoint.section("net"))
    state.head.load_state_dict(checkpoint.section("head"))
    state.w_optim.load_state_dict(checkpoint.section("optim/w"))
    state.alpha_optim.load_state_dict(checkpoint.section("optim/alpha"))
    try:
        state.epoch = int(checkpoint.arrays["state/epoch"][0])
        state.rng = restore_generator(checkpoint.arrays["state/rng"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks loop state entry {exc}") from exc
    state.history = {
        c: checkpoint.arrays.get(f"state/history/{c}", np.zeros(0)).tolist() for c in HISTORY_COLUMNS
    }
    pruned = sum(c.is_pruned for c in state.net.cells)
    logger.info("Resumed search at epoch %d with %d pruned cells", state.epoch, pruned)
    return state


def _objective(
    state: SearchState, images: np.ndarray, labels: np.ndarray, data: Dataset, decision, capture: bool
) -> Tensor:
    config = state.config
    if config.search.objective == "ssl":
        return ssl_forward(
            state.net,
            state.head,
            images,
            config.ssl.augmentation,
            config.ssl.temperature,
            decision.choices,
            seed=decision.seed,
            normalizer=data.normalizer,
            capture=capture,
        )
    return sl_forward(state.net, state.head, images, labels, decision.choices, data.normalizer, capture)


def _finite_loss(loss: Tensor, what: str) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"{what} loss is {value}")
    return value


def weight_step(
    state: SearchState, images: np.ndarray, labels: np.ndarray, data: Dataset, lr: float
) -> float:
    """One sampled-path update of operation weights and the head."""
    seed = int(state.rng.integers(0, 2**63))
    decision = sample_paths(state.net, StepMode.WEIGHT, state.config.search.drop_p, seed)
    params = state.all_params()
    zero_grad(params)
    reset_tape()
    loss = _objective(state, images, labels, data, decision, capture=False)
    value = _finite_loss(loss, "weight-step")
    backward(loss)
    weights = state.weight_params()
    check_finite_grads(weights)
    if state.config.search.grad_clip is not None:
        clip_grad_norm(weights, state.config.search.grad_clip)
    state.w_optim.step(weights, lr)
    logger.debug("weight step: loss=%.5f", value)
    return value


def alpha_step(state: SearchState, images: np.ndarray, labels: np.ndarray, data: Dataset) -> float:
    """One sampled-path update of the open architecture logits."""
    seed = int(state.rng.integers(0, 2**63))
    decision = sample_paths(state.net, StepMode.ALPHA, 0.0, seed)
    zero_grad(state.all_params())
    reset_tape()
    loss = _objective(state, images, labels, data, decision, capture=True)
    value = _finite_loss(loss, "architecture-step")
    backward(loss)
    assign_alpha_gradients(state.net, decision)
    state.alpha_optim.step(state.open_alpha_params())
    logger.debug("architecture step: loss=%.5f", value)
    return value


def fire_prune_events(state: SearchState, epoch: int) -> list[int]:
    cells = state.schedule.prune_events(epoch)
    for index in cells:
        genotype = prune_cell(state.net.cells[index])
        logger.info("Epoch %d: pruned cell %d to %d edges", epoch, index, len(genotype.pairs()))
    if cells:
        state.w_optim.retain(name for name, _ in state.weight_params())
        state.alpha_optim.retain(name for name, _ in state.open_alpha_params())
    return cells


def run_epoch(state: SearchState, train: Dataset, val: Dataset) -> None:
    epoch = state.epoch
    config = state.config
    phase = state.schedule.phase_at(epoch)
    fire_prune_events(state, epoch)
    lr = cosine_lr(config.optim.w_lr, epoch, config.search.max_epochs, config.optim.w_lr_min)
    state.net.train()
    state.head.train()
    batch_size = config.search.batch_size
    w_losses, a_losses = [], []
    train_batches = iterate_batches(train, batch_size, state.rng)
    if phase is Phase.WARMUP:
        for images, labels in train_batches:
            w_losses.append(weight_step(state, images, labels, train, lr))
    else:
        val_batches = itertools.cycle(list(iterate_batches(val, batch_size, state.rng)))
        searching = bool(state.open_alpha_params())
        for images, labels in train_batches:
            if searching:
                v_images, v_labels = next(val_batches)
                a_losses.append(alpha_step(state, v_images, v_labels, val))
            w_losses.append(weight_step(state, images, labels, train, lr))
    state.history["lr"].append(lr)
    state.history["w_loss"].append(float(np.mean(w_losses)) if w_losses else float("nan"))
    state.history["alpha_loss"].append(float(np.mean(a_losses)) if a_losses else float("nan"))
    logger.info(
        "Epoch %d/%d [%s] lr=%.5f w_loss=%.4f alpha_loss=%.4f pruned=%d",
        epoch + 1,
        config.search.max_epochs,
        phase.value,
        lr,
        state.history["w_loss"][-1],
        state.history["alpha_loss"][-1],
        sum(cell.is_pruned for cell in state.net.cells),
    )
    state.epoch += 1


def finalize(state: SearchState) -> Genotype:
    """Derive every cell the schedule left open (all of them under direction `none`)."""
    open_cells = [cell.index for cell in state.net.cells if not cell.is_pruned]
    if open_cells:
        logger.info("Deriving %d remaining cells at the end of search", len(open_cells))
        apply_genotype(state.net, derive_genotype(state.net))
    return current_genotype(state.net)


def split_for_search(config: RunConfig, dataset: Dataset) -> tuple[Dataset, Dataset]:
    """Seeded train/validation split of the search data (weights / logits).

    Raises:
        ConfigError: either part is too small to yield a single batch.
    """
    train, val = split(dataset, 1.0 - config.search.val_fraction, [config.seed, 1])
    batch_size = config.search.batch_size
    for name, part in (("training", train), ("validation", val)):
        if num_batches(part, batch_size) == 0:
            raise ConfigError(
                f"search {name} split has {len(part)} samples, too few for a batch "
                f"(dataset {len(dataset)}, val_fraction {config.search.val_fraction})"
            )
    return train, val


def run_search(
    config: RunConfig,
    dataset: Dataset,
    resume: Checkpoint | None = None,
    out_dir: str | Path | None = None,
) -> Checkpoint:
    """Search a per-cell architecture and return it with its concomitant weights.

    With `out_dir`, the loop writes `last.sswp` after every epoch, then the
    final checkpoint, the genotype and the per-epoch history.

    Raises:
        SearchDivergedError: a loss or gradient became non-finite; the state
            at that point is saved as `diverged.sswp` when `out_dir` is set.
    """
    out = Path(out_dir) if out_dir is not None else None
    train, val = split_for_search(config, dataset)
    if resume is not None:
        state = restore_search_state(config, resume, dataset.image_shape, dataset.classes)
    else:
        state = init_search_state(config, dataset.image_shape, dataset.classes)
    logger.info(
        "Search: %d epochs, warm-up until %d, prune from %d (%s), %d/%d train/val images",
        state.schedule.max_epochs,
        state.schedule.warmup_end,
        state.schedule.fpp_start,
        state.schedule.direction.value,
        len(train),
        len(val),
    )
    while state.epoch < state.schedule.max_epochs:
        try:
            run_epoch(state, train, val)
        except NumericError as exc:
            logger.error("Search diverged at epoch %d: %s", state.epoch, exc)
            path = None
            if out is not None:
                path = str(save_checkpoint(state_to_checkpoint(state), out / DIVERGED_CHECKPOINT_NAME))
            raise SearchDivergedError(f"search diverged at epoch {state.epoch}: {exc}", path) from exc
        if out is not None:
            save_checkpoint(state_to_checkpoint(state), out / LAST_CHECKPOINT_NAME)

    genotype = finalize(state)
    logger.info(
        "Compact network: %d weights, head %d weights",
        state.net.num_parameters(),
        state.head.num_parameters(),
    )
    checkpoint = state_to_checkpoint(state)
    if out is not None:
        save_checkpoint(checkpoint, out / CHECKPOINT_NAME)
        (out / "genotype.json").write_text(genotype.to_text())
        state.history_frame().to_json(out / "history.json", orient="records", indent=2)
        logger.info("Search artifacts written to %s", out)
    return checkpoint


def history_from_checkpoint(checkpoint: Checkpoint) -> pd.DataFrame:
    return pd.DataFrame(
        {c: checkpoint.arrays.get(f"state/history/{c}", np.zeros(0)) for c in HISTORY_COLUMNS}
    )
