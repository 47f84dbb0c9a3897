import numpy as np
import pytest

from src.common.errors import ContractError, DimensionError, NumericError
from src.tensor import functional as F
from src.tensor.core import Tensor, backward, no_grad, precision, reset_tape
from src.tensor.gradcheck import finite_diff_check
from src.tensor.layers import BatchNorm, Conv2d, Linear


def naive_conv2d(x, w, stride, padding, dilation, groups):
    n, _, h, width = x.shape
    c_out, c_group, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (width + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    per_group = c_out // groups
    for o in range(c_out):
        g = o // per_group
        for i in range(oh):
            for j in range(ow):
                y0, x0 = i * stride, j * stride
                patch = xp[
                    :,
                    g * c_group : (g + 1) * c_group,
                    y0 : y0 + dilation * (kh - 1) + 1 : dilation,
                    x0 : x0 + dilation * (kw - 1) + 1 : dilation,
                ]
                out[:, o, i, j] = (patch * w[o]).sum(axis=(1, 2, 3))
    return out


@pytest.mark.parametrize(
    "stride,padding,dilation,groups",
    [(1, 0, 1, 1), (1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (2, 2, 2, 4), (1, 1, 1, 2)],
)
def test_conv2d_matches_direct_loop(stride, padding, dilation, groups, rng):
    x = rng.standard_normal((2, 4, 7, 7))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    with precision(np.float64):
        out = F.conv2d(Tensor(x), Tensor(w), stride, padding, dilation, groups)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, stride, padding, dilation, groups), atol=1e-10)


def test_conv2d_rejects_bad_channels():
    x = Tensor(np.zeros((1, 3, 5, 5)))
    w = Tensor(np.zeros((4, 2, 3, 3)))
    with pytest.raises(DimensionError):
        F.conv2d(x, w)


def test_conv2d_rejects_window_larger_than_input():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def _weighted(out: Tensor, seed: int = 7) -> Tensor:
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    return F.sum(F.mul(out, Tensor(weights)))


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: F.relu(x),
        lambda x: F.log_softmax(F.reshape(x, (2, -1)), axis=1),
        lambda x: F.softmax(F.reshape(x, (2, -1)), axis=1),
        lambda x: F.l2_normalize(F.reshape(x, (2, -1)), axis=1),
        lambda x: F.max_pool2d(x, 3, 2, 1),
        lambda x: F.avg_pool2d(x, 3, 1, 1),
        lambda x: F.global_avg_pool(x),
        lambda x: F.concat([x, F.scalar_mul(x, 2.0)], axis=1),
        lambda x: F.transpose(x, (0, 2, 1, 3)),
        lambda x: x[:, :, 1:, ::2],
        lambda x: F.exp(F.scalar_mul(x, 0.1)),
        lambda x: F.mean(x, axis=(2, 3)),
    ],
)
def test_elementwise_and_reduction_gradients(fn, rng):
    with precision(np.float64):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        assert finite_diff_check(lambda t: _weighted(fn(t)), x, epsilon=1e-6) < 1e-5


def test_conv2d_gradients_for_input_and_weight(rng):
    with precision(np.float64):
        x = Tensor(rng.standard_normal((2, 4, 5, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)

        def loss(_):
            return _weighted(F.conv2d(x, w, stride=2, padding=2, dilation=2, groups=2))

        assert finite_diff_check(loss, x, epsilon=1e-6) < 1e-5
        assert finite_diff_check(loss, w, epsilon=1e-6) < 1e-5


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training, rng):
    with precision(np.float64):
        bn = BatchNorm(3)
        bn.running_var[...] = 2.0
        bn.train(training)
        x = Tensor(rng.standard_normal((4, 3, 2, 2)), requires_grad=True)
        assert finite_diff_check(lambda t: _weighted(bn(t)), x, epsilon=1e-5) < 1e-4
        assert finite_diff_check(lambda _: _weighted(bn(x)), bn.weight, epsilon=1e-5) < 1e-4


def test_linear_and_cross_entropy_gradients(rng):
    with precision(np.float64):
        layer = Linear(5, 3, rng)
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        labels = np.array([0, 2, 1, 2])
        assert finite_diff_check(lambda t: F.cross_entropy(layer(t), labels), x, epsilon=1e-6) < 1e-5

        def loss(_):
            return F.cross_entropy(layer(x), labels)

        assert finite_diff_check(loss, layer.weight, epsilon=1e-6) < 1e-5


def test_shared_input_accumulates_gradient():
    with precision(np.float64):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        reset_tape()
        backward(F.sum(F.add(F.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_unused_leaf_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    reset_tape()
    F.scalar_mul(b, 2.0)
    backward(F.sum(a))
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_backward_requires_scalar_and_a_recorded_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    reset_tape()
    with pytest.raises(ContractError):
        backward(F.scalar_mul(x, 2.0))
    reset_tape()
    with no_grad():
        y = F.sum(x)
    with pytest.raises(ContractError):
        backward(y)


def test_default_dtype_and_precision_switch():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0, 2.0]).dtype == np.float64
        assert Conv2d(1, 1, 3, np.random.default_rng(0)).weight.dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ContractError):
        with precision(np.int32):
            pass


def test_nonfinite_conv_output_is_reported():
    x = Tensor(np.full((1, 1, 3, 3), np.inf))
    with pytest.raises(NumericError):
        F.conv2d(x, Tensor(np.ones((1, 1, 3, 3))))


def test_l2_normalize_of_zero_row_fails():
    with pytest.raises(NumericError):
        F.l2_normalize(Tensor(np.zeros((2, 3))))


def test_drop_path_keeps_expectation(rng):
    x = Tensor(np.ones((4000, 1, 1, 1)))
    assert F.drop_path(x, 0.0, rng) is x
    out = F.drop_path(x, 0.25, rng)
    assert set(np.unique(out.data)).issubset({0.0, np.float32(1 / 0.75)})
    assert abs(out.data.mean() - 1.0) < 0.05


def test_cosine_similarity_matches_numpy(rng):
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    with precision(np.float64):
        out = F.cosine_similarity(Tensor(a), Tensor(b)).data
    expected = (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    np.testing.assert_allclose(out, expected, rtol=1e-12)
    with precision(np.float64):
        np.testing.assert_allclose(F.cosine_similarity(Tensor(a), Tensor(3.0 * a)).data, 1.0)


def test_cosine_similarity_gradient_and_errors(rng):
    with precision(np.float64):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)))
        assert finite_diff_check(lambda t: _weighted(F.cosine_similarity(t, b)), a, epsilon=1e-6) < 1e-5
    with pytest.raises(NumericError):
        F.cosine_similarity(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        F.cosine_similarity(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_finite_difference_of_a_sum_is_exact_in_float64():
    with precision(np.float64):
        x = Tensor(np.arange(12.0).reshape(3, 4) - 6.0, requires_grad=True)
        assert finite_diff_check(F.sum, x, epsilon=2.0**-10) == 0.0
        assert finite_diff_check(F.sum, x) < 1e-9


def test_finite_difference_of_sum_exp(rng):
    with precision(np.float64):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        assert finite_diff_check(lambda t: F.sum(F.exp(t)), x, epsilon=1e-5) < 1e-7


def test_num_parameters_of_a_layer(rng):
    assert Linear(5, 3, rng).num_parameters() == 18
    assert BatchNorm(4).num_parameters() == 8
