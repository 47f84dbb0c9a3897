"""Downstream evaluation of derived architectures.

Supervised fine-tuning from three initializations (random, the concomitant
weights of the search, a separate contrastive pre-training pass), the linear
probe on frozen features, and the label-fraction sweep that tabulates them.

Per-run generators are derived from the run seed: [seed, 3] initializes
weights, [seed, 4] draws the labeled subset, [seed, 5] drives batches and
augmentation, [seed, 6] initializes the pre-training pass.
"""

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from src.common.errors import InitError
from src.config import RunConfig, config_hash
from src.data.dataset import Dataset, iterate_batches, stratified_subset
from src.data.transforms import cutout, random_crop_flip, scaled_length
from src.harness.metrics import EvalReport, RunResult, topk_accuracy
from src.nas.genotype import Genotype
from src.nas.ops import Classifier, build_classifier, build_projection
from src.nas.search_space import SuperNet, apply_genotype, build_network
from src.search.optim import SGD, clip_grad_norm, cosine_lr, zero_grad
from src.ssl.objective import ssl_forward
from src.tensor import functional as F
from src.tensor.core import Tensor, backward, no_grad, reset_tape
from src.tensor.layers import Linear

logger = logging.getLogger(__name__)

EVAL_BATCH = 256


class InitMode(str, Enum):
    RANDOM = "random"
    CONCOMITANT = "concomitant"
    TWO_STAGE = "two_stage"


@dataclass
class PretrainResult:
    weights: dict[str, np.ndarray]
    losses: list[float] = field(default_factory=list)


def build_compact_network(
    config: RunConfig,
    genotype: Genotype,
    input_shape: tuple[int, int, int],
    num_classes: int,
    rng: np.random.Generator,
    weights: dict[str, np.ndarray] | None = None,
) -> SuperNet:
    """Network pruned to `genotype`, optionally loaded with `weights`.

    Raises:
        InitError: the genotype is incomplete or does not fit the configured
            network, or the weights do not match its structure.
    """
    if not genotype.is_complete:
        raise InitError("a compact network needs a genotype with every cell decided")
    n = config.network
    net = build_network(n.cells, n.init_channels, num_classes, input_shape, rng)
    apply_genotype(net, genotype)
    if weights is not None:
        net.load_state_dict(weights)
    logger.debug("Compact network: %d weights", net.num_parameters())
    return net


def _weight_params(net: SuperNet, head) -> list:
    return list(net.named_weight_parameters()) + [(f"head.{k}", p) for k, p in head.named_parameters()]


def evaluate(net: SuperNet, classifier: Classifier, dataset: Dataset) -> tuple[float, float, float]:
    """(mean cross-entropy, top-1, top-5) on `dataset` in inference mode."""
    net.eval()
    classifier.eval()
    logits = []
    with no_grad():
        for start in range(0, len(dataset), EVAL_BATCH):
            images = dataset.images[start : start + EVAL_BATCH]
            logits.append(classifier(net(Tensor(dataset.normalize(images)))).data)
    scores = np.concatenate(logits).astype(np.float64)
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(len(dataset)), dataset.labels].mean())
    return loss, topk_accuracy(scores, dataset.labels, 1), topk_accuracy(scores, dataset.labels, 5)


def _augment(images: np.ndarray, data: Dataset, config: RunConfig, rng: np.random.Generator) -> np.ndarray:
    t = config.train
    size = images.shape[-1]
    if t.augment:
        images = random_crop_flip(images, scaled_length(t.crop_padding, size), rng)
    images = data.normalize(images)
    if t.augment and t.cutout:
        images = cutout(images, scaled_length(t.cutout, size), rng)
    return images


def two_stage_pretrain(
    genotype: Genotype, epochs: int, config: RunConfig, dataset: Dataset, seed: int | None = None
) -> PretrainResult:
    """Contrastive training of the compact network from a fresh random init.

    Uses the search-stage weight optimizer constants and the configured
    augmentation policy; the projection neck is discarded afterwards.
    """
    seed = config.seed if seed is None else seed
    init_rng = np.random.default_rng([seed, 6])
    net = build_compact_network(config, genotype, dataset.image_shape, dataset.classes, init_rng)
    projection = build_projection(
        net.feature_dim, config.network.projection_hidden, config.network.projection_out, init_rng
    )
    o = config.optim
    optim = SGD(o.w_lr, o.w_momentum, o.w_weight_decay)
    loop_rng = np.random.default_rng([seed, 7])
    result = PretrainResult(weights={})
    params = _weight_params(net, projection)
    for epoch in range(epochs):
        lr = cosine_lr(o.w_lr, epoch, epochs, o.w_lr_min)
        net.train()
        projection.train()
        losses = []
        for images, _ in iterate_batches(dataset, config.search.batch_size, loop_rng):
            zero_grad(params)
            reset_tape()
            loss = ssl_forward(
                net,
                projection,
                images,
                config.ssl.augmentation,
                config.ssl.temperature,
                seed=int(loop_rng.integers(0, 2**63)),
                normalizer=dataset.normalizer,
            )
            backward(loss)
            if config.search.grad_clip is not None:
                clip_grad_norm(params, config.search.grad_clip)
            optim.step(params, lr)
            losses.append(loss.item())
        result.losses.append(float(np.mean(losses)))
        logger.info("Pre-train epoch %d/%d: loss=%.4f", epoch + 1, epochs, result.losses[-1])
    result.weights = net.state_dict()
    return result


def train_supervised(
    genotype: Genotype,
    init: InitMode | str,
    fraction: float,
    epochs: int,
    config: RunConfig,
    train: Dataset,
    test: Dataset,
    weights: dict[str, np.ndarray] | None = None,
    seed: int | None = None,
    lr: float | None = None,
) -> EvalReport:
    """Fine-tune the compact network on a stratified labeled subset and evaluate it.

    Args:
        init: random, concomitant (needs `weights` from the search) or
            two_stage (uses `weights` when given, otherwise pre-trains first).
        fraction: Labeled fraction of `train`, in (0, 1].
        lr: Overrides the configured learning rate, for learning-rate sweeps.

    Raises:
        InitError: concomitant init without weights, or weights that do not
            match the genotype.
    """
    init = InitMode(init)
    seed = config.seed if seed is None else seed
    lr0 = config.train.lr if lr is None else lr
    t = config.train
    init_rng = np.random.default_rng([seed, 3])
    match init:
        case InitMode.RANDOM:
            weights = None
        case InitMode.CONCOMITANT if weights is None:
            raise InitError("concomitant initialization needs the search checkpoint's weights")
        case InitMode.TWO_STAGE if weights is None:
            weights = two_stage_pretrain(genotype, t.pretrain_epochs, config, train, seed).weights
    net = build_compact_network(config, genotype, train.image_shape, train.classes, init_rng, weights)
    classifier = build_classifier(net.feature_dim, train.classes, init_rng)
    labeled = stratified_subset(train, fraction, [seed, 4])
    loop_rng = np.random.default_rng([seed, 5])
    optim = SGD(lr0, t.momentum, t.weight_decay)
    params = _weight_params(net, classifier)
    curve = []
    for epoch in range(epochs):
        lr_epoch = cosine_lr(lr0, epoch, epochs)
        drop_prob = t.drop_path * epoch / epochs
        net.train()
        classifier.train()
        losses = []
        for images, labels in iterate_batches(labeled, t.batch_size, loop_rng):
            x = Tensor(_augment(images, labeled, config, loop_rng))
            zero_grad(params)
            reset_tape()
            logits = classifier(net(x, drop_path_prob=drop_prob, rng=loop_rng))
            loss = F.cross_entropy(logits, labels)
            backward(loss)
            if t.grad_clip is not None:
                clip_grad_norm(params, t.grad_clip)
            optim.step(params, lr_epoch)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)) if losses else float("nan"))
        logger.debug("Fine-tune epoch %d/%d: loss=%.4f", epoch + 1, epochs, curve[-1])
    test_loss, top1, top5 = evaluate(net, classifier, test)
    logger.info(
        "Fine-tune [%s, f=%.2f, seed=%d, lr=%.4f]: top1=%.4f top5=%.4f",
        init.value,
        fraction,
        seed,
        lr0,
        top1,
        top5,
    )
    digest = config_hash(config)
    run = RunResult(seed, init.value, fraction, top1, top5, test_loss, lr0, epochs, digest, curve)
    return EvalReport([run])


def extract_features(net: SuperNet, dataset: Dataset) -> np.ndarray:
    """Globally pooled encoder features, computed in inference mode without recording."""
    net.eval()
    chunks = []
    with no_grad():
        for start in range(0, len(dataset), EVAL_BATCH):
            images = dataset.images[start : start + EVAL_BATCH]
            chunks.append(F.global_avg_pool(net(Tensor(dataset.normalize(images)))).data)
    return np.concatenate(chunks)


def linear_probe(
    weights: dict[str, np.ndarray] | None,
    genotype: Genotype,
    train: Dataset,
    test: Dataset,
    config: RunConfig,
    seed: int | None = None,
) -> float:
    """Test accuracy of a linear classifier trained on frozen encoder features.

    `weights=None` probes the random initialization.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 3])
    net = build_compact_network(config, genotype, train.image_shape, train.classes, rng, weights)
    train_x, test_x = extract_features(net, train), extract_features(net, test)
    mean, std = train_x.mean(axis=0), train_x.std(axis=0) + 1e-6
    train_x, test_x = (train_x - mean) / std, (test_x - mean) / std

    p = config.probe
    fc = Linear(train_x.shape[1], train.classes, rng)
    params = [(f"fc.{k}", v) for k, v in fc.named_parameters()]
    optim = SGD(p.lr, p.momentum, p.weight_decay)
    loop_rng = np.random.default_rng([seed, 5])
    features = Dataset(train_x[:, :, None, None], train.labels, train.classes)
    for epoch in range(p.epochs):
        lr = cosine_lr(p.lr, epoch, p.epochs)
        for x, labels in iterate_batches(features, p.batch_size, loop_rng):
            zero_grad(params)
            reset_tape()
            loss = F.cross_entropy(fc(Tensor(x[:, :, 0, 0])), labels)
            backward(loss)
            optim.step(params, lr)
    with no_grad():
        logits = fc(Tensor(test_x.astype(train_x.dtype))).data
    accuracy = topk_accuracy(logits, test.labels, 1)
    logger.info("Linear probe: %d features, accuracy=%.4f", train_x.shape[1], accuracy)
    return accuracy


def label_fraction_sweep(
    config: RunConfig,
    genotype: Genotype,
    train: Dataset,
    test: Dataset,
    fractions: Iterable[float] = (0.9, 0.7, 0.5, 0.3, 0.1),
    inits: Iterable[InitMode | str] = (InitMode.RANDOM, InitMode.CONCOMITANT),
    seeds: Iterable[int] = (0, 1, 2, 3, 4),
    weights: dict[str, np.ndarray] | None = None,
    epochs: int | None = None,
) -> tuple[pd.DataFrame, EvalReport]:
    """Fine-tune every (fraction, init, seed) combination.

    Two-stage weights are pre-trained once per seed and reused across fractions.

    Returns:
        The aggregate table (mean and std per init and fraction) and the full report.
    """
    epochs = config.train.epochs if epochs is None else epochs
    report = EvalReport()
    pretrained: dict[int, dict[str, np.ndarray]] = {}
    for seed in seeds:
        for init in map(InitMode, inits):
            init_weights = weights
            if init is InitMode.TWO_STAGE:
                if seed not in pretrained:
                    pretrained[seed] = two_stage_pretrain(
                        genotype, config.train.pretrain_epochs, config, train, seed
                    ).weights
                init_weights = pretrained[seed]
            for fraction in fractions:
                run = train_supervised(
                    genotype, init, fraction, epochs, config, train, test, init_weights, seed
                )
                report.extend(run)
    return report.aggregate(), report
