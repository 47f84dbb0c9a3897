"""Contrastive (infoNCE) and supervised objectives evaluated through the supernet.

Views are stacked block-wise: row i of the embedding matrix pairs with row
i + N. For every row the loss is a softmax cross-entropy over its cosine
similarities to all other rows, with the paired row as the target:

    L_i = -log( exp(sim(z_i, z_j(i)) / t) / sum_{k != i} exp(sim(z_i, z_k) / t) )
"""

import logging
from collections.abc import Mapping

import numpy as np

from src.common.errors import ContractError, DimensionError
from src.data.dataset import Normalizer
from src.nas.ops import Classifier, ProjectionNeck
from src.nas.search_space import EdgeKey, SuperNet
from src.ssl.augment import AugmentationPolicy, two_views
from src.tensor import functional as F
from src.tensor.core import Tensor

logger = logging.getLogger(__name__)

# Added to self-similarities so they vanish from the softmax denominator.
SELF_MASK = -1e9


def pair_index(n_rows: int) -> np.ndarray:
    """Index of the positive partner of every row under the block-wise pairing."""
    half = n_rows // 2
    return np.concatenate([np.arange(half, n_rows), np.arange(half)])


def info_nce(z: Tensor, temperature: float, reduction: str = "sum") -> Tensor:
    """infoNCE over 2N embeddings.

    Args:
        z: (2N, D) embeddings, views stacked block-wise.
        temperature: Positive similarity scale.
        reduction: "sum" for the batch total, "mean" to divide by 2N.

    Raises:
        DimensionError: z is not 2-D with an even, nonzero number of rows.
        NumericError: an embedding row has zero norm.
    """
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise DimensionError(f"info_nce needs (2N, D) embeddings with N >= 1, got {z.shape}")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    m = z.shape[0]
    logits = F.scalar_mul(F.pairwise_cosine(z), 1.0 / temperature)
    logits = F.add(logits, Tensor(np.eye(m, dtype=z.dtype) * SELF_MASK))
    targets = np.zeros((m, m), dtype=z.dtype)
    targets[np.arange(m), pair_index(m)] = 1.0
    total = F.scalar_mul(F.sum(F.mul(F.log_softmax(logits, axis=1), Tensor(targets))), -1.0)
    return total if reduction == "sum" else F.scalar_mul(total, 1.0 / m)


def _prepare(images: np.ndarray, normalizer: Normalizer | None) -> Tensor:
    return Tensor(images if normalizer is None else normalizer(images))


def ssl_forward(
    net: SuperNet,
    projection: ProjectionNeck,
    images: np.ndarray,
    policy: AugmentationPolicy,
    temperature: float,
    choices: Mapping[EdgeKey, int] | None = None,
    seed: int = 0,
    normalizer: Normalizer | None = None,
    capture: bool = False,
) -> Tensor:
    """Mean infoNCE of the projected encoder embeddings of two views of `images`.

    Returns the batch sum of `info_nce` divided by 2N (reduction "mean").
    Search weight and logit steps and the two-stage pre-training all
    minimize this per-row mean.

    Both views pass through the network as one batch of 2N so they share the
    sampled path and the batch-norm statistics.
    """
    first, second = two_views(images, policy, seed)
    x = _prepare(np.concatenate([first, second]), normalizer)
    z = projection(net(x, choices, capture=capture))
    return info_nce(z, temperature, reduction="mean")


def sl_forward(
    net: SuperNet,
    classifier: Classifier,
    images: np.ndarray,
    labels: np.ndarray,
    choices: Mapping[EdgeKey, int] | None = None,
    normalizer: Normalizer | None = None,
    capture: bool = False,
    drop_path_prob: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Cross-entropy of a linear classifier on the encoder features."""
    x = _prepare(images, normalizer)
    features = net(x, choices, capture=capture, drop_path_prob=drop_path_prob, rng=rng)
    return F.cross_entropy(classifier(features), labels)
