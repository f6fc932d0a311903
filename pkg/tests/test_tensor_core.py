# test_tensor_core.py - 稠密张量与参考卷积核测试
import numpy as np
import pytest

from conftest import check_gradients, naive_conv2d, relative_error
from core_system import DimensionError
from data_models import Precision
from tensor_core import (
    ConvLayer, MomentumSGD, Tensor, avg_pool2d, avg_pool2d_backward, dense_conv2d, dense_conv2d_backward,
    elementwise_add, gemm, im2col, l2_normalize_backward, l2_normalize_channels, nearest_upsample,
    pad_to_multiple, relu, sigmoid
)


# ===== Tensor / ConvLayer =====
def test_tensor_offset_is_row_major():
    t = Tensor(np.arange(2 * 3 * 4 * 5, dtype=np.float64).reshape(2, 3, 4, 5))
    assert t.offset(1, 2, 3, 4) == t.data[1, 2, 3, 4]
    assert t.size == 120
    assert t.precision is Precision.FP64


def test_tensor_rejects_non_4d():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((3, 3)))


def test_output_size_must_be_positive():
    layer = ConvLayer(Tensor(np.zeros((1, 1, 5, 5))), np.zeros(1))
    with pytest.raises(DimensionError, match="too small"):
        layer.output_size(3, 3)


# ===== 卷积 =====
def test_identity_kernel():
    layer = ConvLayer(Tensor(np.ones((1, 1, 1, 1))), np.zeros(1))
    out = dense_conv2d(Tensor(np.ones((1, 1, 3, 3))), layer)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))


def test_zero_input_gives_bias(make_layer):
    layer = make_layer(2, 1, 3, padding=1)
    out = dense_conv2d(Tensor(np.zeros((1, 1, 3, 3))), layer)
    expected = np.broadcast_to(layer.bias[None, :, None, None], (1, 2, 3, 3))
    np.testing.assert_allclose(out.data, expected, rtol=1e-6)


def test_channel_mismatch_names_both_shapes(make_layer):
    layer = make_layer(2, 3, 3)
    with pytest.raises(DimensionError, match=r"\(1, 2, 8, 8\).*\(2, 3, 3, 3\)"):
        dense_conv2d(Tensor(np.zeros((1, 2, 8, 8))), layer)


def test_dense_conv_matches_loop_oracle(rng, make_layer):
    x = rng.standard_normal((1, 4, 16, 16))
    layer = make_layer(3, 4, 3, padding=1, precision=Precision.FP64)
    out = dense_conv2d(Tensor(x), layer)
    ref = naive_conv2d(x, layer.weights.data, layer.bias, 1, 1)
    assert relative_error(out.data, ref) < 1e-5


def test_dense_conv_random_configs(rng, make_layer):
    for _ in range(100):
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.choice([0, 1]))
        size = int(rng.integers(k, 10))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((1, cin, size, size)).astype(np.float32)
        layer = make_layer(cout, cin, k, stride, padding)
        out = dense_conv2d(Tensor(x), layer)
        ref = naive_conv2d(x, layer.weights.data, layer.bias, stride, padding)
        assert out.shape == ref.shape
        assert relative_error(out.data, ref) < 1e-5


def test_im2col_shapes_and_rows():
    x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
    cols = im2col(x, ConvLayer(Tensor(np.ones((1, 1, 1, 1))), np.zeros(1)))
    np.testing.assert_array_equal(cols[0], np.arange(4).reshape(4, 1))

    x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    cols = im2col(x, ConvLayer(Tensor(np.ones((1, 1, 3, 3))), np.zeros(1), padding=1))
    assert cols.shape == (1, 9, 9)
    np.testing.assert_array_equal(cols[0, 4], np.arange(9))

    cols = im2col(Tensor(np.zeros((1, 2, 4, 4))), ConvLayer(Tensor(np.ones((1, 2, 3, 3))), np.zeros(1)))
    assert cols.shape == (1, 4, 18)


# ===== GEMM =====
def test_gemm_small_cases(rng):
    m = rng.standard_normal((5, 5))
    np.testing.assert_array_equal(gemm(np.eye(5), m), m)
    np.testing.assert_array_equal(gemm(np.array([[1., 2.], [3., 4.]]), np.array([[5., 6.], [7., 8.]])),
                                  np.array([[19., 22.], [43., 50.]]))


def test_gemm_matches_triple_loop(rng):
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    ref = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            for k in range(8):
                ref[i, j] += a[i, k] * b[k, j]
    assert relative_error(gemm(a, b), ref) < 1e-6


def test_gemm_dimension_mismatch():
    with pytest.raises(DimensionError):
        gemm(np.zeros((2, 3)), np.zeros((2, 3)))


def test_gemm_threads_and_row_subsets_are_bit_identical(rng):
    a = rng.standard_normal((1000, 27)).astype(np.float32)
    b = rng.standard_normal((27, 16)).astype(np.float32)
    serial = gemm(a, b)
    np.testing.assert_array_equal(gemm(a, b, threads=4), serial)
    rows = np.sort(rng.choice(1000, size=300, replace=False))
    np.testing.assert_array_equal(gemm(a[rows], b), serial[rows])


# ===== 池化 / 上采样 / 归一化 =====
def _loop_avg_pool(x, window, stride):
    n, c, h, w = x.shape
    ho = -(-max(h - window, 0) // stride) + 1
    wo = -(-max(w - window, 0) // stride) + 1
    out = np.zeros((n, c, ho, wo))
    for y in range(ho):
        for xx in range(wo):
            patch = x[:, :, y * stride:min(y * stride + window, h), xx * stride:min(xx * stride + window, w)]
            out[:, :, y, xx] = patch.mean(axis=(2, 3))
    return out


def test_avg_pool_examples():
    out = avg_pool2d(Tensor(np.array([[[[1., 2.], [3., 4.]]]])), 2, 2)
    np.testing.assert_array_equal(out.data, [[[[2.5]]]])
    const = avg_pool2d(Tensor(np.full((1, 2, 5, 7), 3.0)), 2, 2)
    assert const.shape == (1, 2, 3, 4)
    np.testing.assert_allclose(const.data, 3.0)


@pytest.mark.parametrize("shape", [(1, 3, 8, 8), (2, 2, 5, 7)])
def test_avg_pool_matches_loop_oracle(rng, shape):
    x = rng.standard_normal(shape)
    assert relative_error(avg_pool2d(Tensor(x), 2, 2).data, _loop_avg_pool(x, 2, 2)) < 1e-6


def test_nearest_upsample():
    x = Tensor(np.array([[[[7.0]]]]))
    np.testing.assert_array_equal(nearest_upsample(x, 1).data, x.data)
    np.testing.assert_array_equal(nearest_upsample(x, 2).data, np.full((1, 1, 2, 2), 7.0))
    const = Tensor(np.full((1, 1, 8, 8), 2.0))
    np.testing.assert_array_equal(nearest_upsample(avg_pool2d(const, 2, 2), 2).data, const.data)
    with pytest.raises(DimensionError):
        nearest_upsample(x, 0)


def test_pad_to_multiple_replicates_edges():
    x = Tensor(np.arange(2 * 3, dtype=np.float32).reshape(1, 1, 2, 3))
    padded = pad_to_multiple(x, 4)
    assert padded.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(padded.data[:, :, :2, :3], x.data)
    np.testing.assert_array_equal(padded.data[0, 0, 3], [3, 4, 5, 5])
    assert padded.precision is Precision.FP32

    aligned = Tensor(np.zeros((1, 1, 64, 32)))
    assert pad_to_multiple(aligned) is aligned
    assert pad_to_multiple(Tensor(np.zeros((1, 1, 100, 70)))).shape == (1, 1, 128, 96)
    with pytest.raises(DimensionError):
        pad_to_multiple(x, 0)


def test_l2_normalize_examples(rng):
    zero = l2_normalize_channels(Tensor(np.zeros((1, 3, 2, 2))))
    np.testing.assert_array_equal(zero.data, 0.0)
    v = l2_normalize_channels(Tensor(np.array([3.0, 4.0]).reshape(1, 2, 1, 1)))
    np.testing.assert_allclose(v.data.ravel(), [0.6, 0.8], rtol=1e-9)
    x = rng.standard_normal((2, 5, 4, 4))
    norms = np.linalg.norm(l2_normalize_channels(Tensor(x)).data, axis=1)
    assert (norms > 0).all() and (norms <= 1 + 1e-6).all()
    expected = x / np.sqrt((x ** 2).sum(axis=1, keepdims=True) + 1e-12)
    assert relative_error(l2_normalize_channels(Tensor(x)).data, expected) < 1e-6


def test_pointwise_ops():
    np.testing.assert_array_equal(relu(Tensor(np.array([-1., 2.]).reshape(1, 1, 1, 2))).data.ravel(), [0, 2])
    assert sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).data.item() == 0.5
    big = sigmoid(Tensor(np.array([-1000., 1000.]).reshape(1, 1, 1, 2))).data.ravel()
    assert np.isfinite(big).all() and big[0] == 0.0 and big[1] == 1.0
    m = Tensor(np.arange(4.).reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(elementwise_add(m, Tensor(np.zeros((1, 1, 2, 2)))).data, m.data)
    with pytest.raises(DimensionError):
        elementwise_add(m, Tensor(np.zeros((1, 1, 2, 3))))


def test_kernels_are_pure(rng, make_layer):
    x = Tensor(rng.standard_normal((1, 3, 9, 9)).astype(np.float32))
    before = x.data.copy()
    layer = make_layer(4, 3, 3, 2, 1)
    np.testing.assert_array_equal(dense_conv2d(x, layer).data, dense_conv2d(x, layer).data)
    np.testing.assert_array_equal(dense_conv2d(x, layer, threads=3).data, dense_conv2d(x, layer).data)
    np.testing.assert_array_equal(x.data, before)


# ===== 反向 =====
def test_conv_backward_finite_differences(rng, make_layer):
    x = Tensor(rng.standard_normal((1, 2, 7, 7)))
    layer = make_layer(3, 2, 3, stride=2, padding=1, precision=Precision.FP64)
    probe = rng.standard_normal(dense_conv2d(x, layer).shape)

    def loss():
        return float((dense_conv2d(x, layer).data * probe).sum())

    gx, gw, gb = dense_conv2d_backward(Tensor(probe), x, layer)
    err = check_gradients(loss, [x.data, layer.weights.data, layer.bias], [gx.data, gw, gb], rng)
    assert err < 1e-5


def test_pool_and_l2_backward_finite_differences(rng):
    x = Tensor(rng.standard_normal((1, 3, 5, 5)))
    probe_pool = rng.standard_normal(avg_pool2d(x, 2, 2).shape)
    probe_norm = rng.standard_normal(x.shape)

    g_pool = avg_pool2d_backward(Tensor(probe_pool), x.shape, 2, 2)
    err = check_gradients(lambda: float((avg_pool2d(x, 2, 2).data * probe_pool).sum()),
                          [x.data], [g_pool.data], rng, samples=20)
    assert err < 1e-5

    g_norm = l2_normalize_backward(Tensor(probe_norm), x)
    err = check_gradients(lambda: float((l2_normalize_channels(x).data * probe_norm).sum()),
                          [x.data], [g_norm.data], rng, samples=20)
    assert err < 1e-5


# ===== 优化器 =====
def test_momentum_sgd_schedule_and_update():
    layer = ConvLayer(Tensor(np.ones((1, 1, 1, 1))), np.zeros(1))
    opt = MomentumSGD([layer], learning_rate=0.1, momentum=0.5, total_steps=9, decay_points=[2 / 3])
    assert opt.learning_rate_at(0) == pytest.approx(0.1)
    assert opt.learning_rate_at(6) == pytest.approx(0.01)
    grad = [(np.ones((1, 1, 1, 1), dtype=np.float32), np.ones(1, dtype=np.float32))]
    opt.step(grad)
    opt.step(grad)
    # v1 = -0.1, v2 = 0.5 * v1 - 0.1
    assert layer.weights.data.item() == pytest.approx(1 - 0.1 - 0.15, rel=1e-6)
    with pytest.raises(DimensionError):
        opt.step([])
