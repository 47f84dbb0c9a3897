import math

import numpy as np
import pytest

from src.common.errors import ContractError, DimensionError
from src.nas.ops import build_projection
from src.nas.search_space import build_network
from src.ssl.augment import AugmentationPolicy, augment_batch, resize_bilinear, two_views
from src.ssl.objective import info_nce, pair_index, ssl_forward
from src.tensor.core import Tensor, precision
from src.tensor.gradcheck import finite_diff_check


def reference_info_nce(z: np.ndarray, temperature: float) -> float:
    m = len(z)
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    sim = zn @ zn.T / temperature
    total = 0.0
    for i in range(m):
        j = (i + m // 2) % m
        denominator = sum(math.exp(sim[i, k]) for k in range(m) if k != i)
        total -= math.log(math.exp(sim[i, j]) / denominator)
    return total


def test_pair_index():
    np.testing.assert_array_equal(pair_index(6), [3, 4, 5, 0, 1, 2])


def test_identical_embeddings_give_log_of_negatives():
    with precision(np.float64):
        loss = info_nce(Tensor(np.ones((4, 3))), 0.5)
    assert loss.item() == pytest.approx(4 * math.log(3), rel=1e-9)


def test_separated_pairs_at_low_temperature_cost_nothing():
    z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    with precision(np.float64):
        loss = info_nce(Tensor(z), 0.01)
    assert loss.item() < 1e-6


@pytest.mark.parametrize("temperature", [0.1, 0.5, 1.0])
def test_matches_double_loop_reference(temperature, rng):
    z = rng.standard_normal((6, 5))
    with precision(np.float64):
        loss = info_nce(Tensor(z), temperature)
        mean = info_nce(Tensor(z), temperature, reduction="mean")
    assert loss.item() == pytest.approx(reference_info_nce(z, temperature), rel=1e-9)
    assert mean.item() == pytest.approx(loss.item() / 6, rel=1e-12)


def test_info_nce_gradient(rng):
    with precision(np.float64):
        z = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        assert finite_diff_check(lambda t: info_nce(t, 0.5), z, epsilon=1e-6) < 1e-5


def test_info_nce_rejects_bad_input():
    with pytest.raises(DimensionError):
        info_nce(Tensor(np.ones((3, 2))), 0.5)
    with pytest.raises(DimensionError):
        info_nce(Tensor(np.ones(4)), 0.5)
    with pytest.raises(ContractError):
        info_nce(Tensor(np.ones((4, 2))), 0.0)


def test_identity_policy_returns_the_input(rng):
    images = rng.random((3, 3, 8, 8)).astype(np.float32)
    first, second = two_views(images, AugmentationPolicy.identity(), seed=0)
    np.testing.assert_array_equal(first, images)
    np.testing.assert_array_equal(second, images)


def test_flip_only_policy_mirrors_every_view(rng):
    images = rng.random((2, 3, 8, 8)).astype(np.float32)
    policy = AugmentationPolicy(
        crop_scale=(1.0, 1.0),
        crop_ratio=(1.0, 1.0),
        hflip=1.0,
        brightness=0.0,
        contrast=0.0,
        saturation=0.0,
        jitter_probability=0.0,
        grayscale=0.0,
    )
    first, _ = two_views(images, policy, seed=0)
    np.testing.assert_array_equal(first, images[:, :, :, ::-1])


def test_default_policy_is_seeded_and_stays_in_range(rng):
    images = rng.random((4, 3, 8, 8)).astype(np.float32)
    policy = AugmentationPolicy()
    a = augment_batch(images, policy, seed=5, view=0)
    np.testing.assert_array_equal(a, augment_batch(images, policy, seed=5, view=0))
    assert not np.array_equal(a, augment_batch(images, policy, seed=5, view=1))
    assert a.shape == images.shape and a.dtype == images.dtype
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_augment_batch_needs_nchw():
    with pytest.raises(DimensionError):
        augment_batch(np.zeros((3, 8, 8)), AugmentationPolicy(), 0, 0)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(crop_scale=(0.8, 0.2))
    with pytest.raises(ValueError):
        AugmentationPolicy(unknown=1.0)


def test_resize_bilinear_preserves_constant_images():
    image = np.full((3, 4, 6), 0.25)
    out = resize_bilinear(image, 8, 8)
    assert out.shape == (3, 8, 8)
    np.testing.assert_allclose(out, 0.25)


def test_ssl_forward_gives_a_finite_scalar(tiny_data):
    train, _ = tiny_data
    rng = np.random.default_rng(0)
    net = build_network(2, 2, 2, train.image_shape, rng)
    head = build_projection(net.feature_dim, 8, 4, rng)
    loss = ssl_forward(net, head, train.images[:4], AugmentationPolicy(), 0.5, seed=1)
    assert loss.size == 1
    assert np.isfinite(loss.item())
    assert 0.0 < loss.item() < 10.0


def test_info_nce_ignores_the_order_of_pairs_and_views(rng):
    z = rng.standard_normal((8, 5))
    order = rng.permutation(4)
    shuffled = np.concatenate([z[:4][order], z[4:][order]])
    swapped = np.concatenate([z[4:], z[:4]])
    with precision(np.float64):
        loss = info_nce(Tensor(z), 0.5).item()
        assert info_nce(Tensor(shuffled), 0.5).item() == pytest.approx(loss, rel=1e-12)
        assert info_nce(Tensor(swapped), 0.5).item() == pytest.approx(loss, rel=1e-12)


def test_info_nce_ignores_the_scale_of_each_embedding(rng):
    z = rng.standard_normal((6, 4))
    scaled = z * rng.uniform(0.01, 100.0, size=(6, 1))
    with precision(np.float64):
        loss = info_nce(Tensor(z), 0.2).item()
        assert info_nce(Tensor(scaled), 0.2).item() == pytest.approx(loss, rel=1e-10)


def test_ssl_forward_is_the_per_row_mean_of_info_nce(tiny_data):
    train, _ = tiny_data
    rng = np.random.default_rng(0)
    net = build_network(2, 2, 2, train.image_shape, rng)
    head = build_projection(net.feature_dim, 8, 4, rng)
    images, policy = train.images[:4], AugmentationPolicy()
    loss = ssl_forward(net, head, images, policy, 0.5, seed=3).item()

    first, second = two_views(images, policy, 3)
    z = head(net(Tensor(np.concatenate([first, second]))))
    assert loss == pytest.approx(info_nce(z, 0.5).item() / 8, rel=1e-5)
