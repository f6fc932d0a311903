# test_synthesis.py - 块随机合成、背景缩放与模式选择测试
import numpy as np
import pytest

from core_system import ConfigurationError, DimensionError, ModeError
from data_models import (
    Background, GuidanceMask, MaskSource, MaskView, Phase, PipelineMode, PointwiseOp, SynthesisConfig,
    TrainingStrategy
)
from detector import ToyDetector
from guided_kernels import guided_conv2d, guided_pointwise, mask_project
from synthesis import draw_seed, extend_mask_random, pipeline_mode_select, scale_background
from tensor_core import ConvLayer, Tensor, dense_conv2d


def sparse_mask(rng, shape=(100, 100), ratio=0.1):
    return GuidanceMask(rng.random(shape) < ratio)


# ===== extend_mask_random =====
def test_degenerate_probabilities(rng):
    mask = sparse_mask(rng)
    np.testing.assert_array_equal(extend_mask_random(mask, SynthesisConfig(0.0, 7)).grid, mask.grid)
    assert extend_mask_random(mask, SynthesisConfig(1.0, 7)).grid.all()


@pytest.mark.parametrize("p", [0.2, 0.4, 0.8])
def test_flip_rate_within_three_sigma(rng, p):
    mask = sparse_mask(rng, (120, 120))
    background = ~mask.grid
    n = int(background.sum())
    assert n >= 10_000
    out = extend_mask_random(mask, SynthesisConfig(p, 2024)).grid
    rate = out[background].mean()
    sigma = np.sqrt(p * (1 - p) / n)
    assert abs(rate - p) <= 3 * sigma


def test_extension_is_monotone_and_deterministic(rng):
    mask = sparse_mask(rng, (20, 30), 0.3)
    a = extend_mask_random(mask, SynthesisConfig(0.4, 11))
    b = extend_mask_random(mask, SynthesisConfig(0.4, 11))
    np.testing.assert_array_equal(a.grid, b.grid)
    assert (a.grid >= mask.grid).all()
    assert a.cell_size == mask.cell_size


def test_draw_seed_varies_per_epoch_and_image():
    seeds = {draw_seed(0, epoch, idx) for epoch in range(5) for idx in range(20)}
    assert len(seeds) == 100
    assert draw_seed(3, 1, 2) == draw_seed(3, 1, 2)


def test_synthesis_config_validates_p():
    with pytest.raises(ValueError):
        SynthesisConfig(1.5)


# ===== scale_background =====
def test_scale_background(rng):
    x = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
    view = MaskView(rng.random((8, 8)) < 0.5)
    np.testing.assert_array_equal(scale_background(x, view, 1.0).data, x.data)
    zeroed = scale_background(x, view, 0.0).data
    np.testing.assert_array_equal(zeroed[:, :, ~view.grid], 0.0)
    np.testing.assert_array_equal(zeroed[:, :, view.grid], x.data[:, :, view.grid])

    out = scale_background(x, view, 0.8).data
    np.testing.assert_array_equal(out[:, :, view.grid], x.data[:, :, view.grid])
    np.testing.assert_array_equal(out[:, :, ~view.grid], x.data[:, :, ~view.grid] * np.float32(0.8))

    with pytest.raises(DimensionError):
        scale_background(x, MaskView.full(4, 4), 0.5)
    with pytest.raises(ConfigurationError):
        scale_background(x, view, 1.5)


def test_scale_zero_matches_guided_zeroing(rng):
    x = Tensor(np.abs(rng.standard_normal((1, 2, 6, 6))))
    view = MaskView(rng.random((6, 6)) < 0.5)
    np.testing.assert_array_equal(scale_background(x, view, 0.0).data,
                                  guided_pointwise(PointwiseOp.RELU, x, view).data)


def test_dropout_expectation_identity(rng):
    """线性层：合成掩码下的期望输出等于背景按 p 缩放后的输出"""
    p, draws = 0.4, 20_000
    size = 8
    # 每个像素一个格子：5x5 卷积的输出平均了多个独立抽样
    mask = GuidanceMask(rng.random((size, size)) < 0.25, cell_size=1)
    layer = ConvLayer(Tensor(rng.uniform(0.5, 1.0, (2, 2, 5, 5))), np.zeros(2), padding=2)
    x = Tensor(rng.uniform(1.0, 2.0, (1, 2, size, size)))
    base_view = mask_project(mask, size, size, size, size)

    total = np.zeros((1, 2, size, size))
    for i in range(draws):
        extended = extend_mask_random(mask, SynthesisConfig(p, draw_seed(99, 0, i)))
        view = mask_project(extended, size, size, size, size)
        total += dense_conv2d(scale_background(x, view, 0.0), layer).data
    mean = total / draws
    expected = dense_conv2d(scale_background(x, base_view, p), layer).data
    assert (np.abs(mean - expected) <= 0.02 * np.abs(expected)).all()


# ===== pipeline_mode_select =====
def test_mode_select_policies():
    dense = pipeline_mode_select("dense", "test")
    assert dense.mask_source is MaskSource.NONE and not dense.uses_mask

    train = pipeline_mode_select(PipelineMode.GUIDED, Phase.TRAIN)
    assert train.mask_source is MaskSource.GROUND_TRUTH
    assert train.extend_with_synthesis and train.background is Background.ZERO

    retrain = pipeline_mode_select("guided", "train", TrainingStrategy.PREDICTED_RETRAIN)
    assert retrain.mask_source is MaskSource.PREDICTED and not retrain.extend_with_synthesis
    assert not pipeline_mode_select("guided", "train", "predicted_no_retrain").uses_mask

    guided = pipeline_mode_select("guided", "test")
    assert guided.mask_source is MaskSource.PREDICTED and not guided.extend_with_synthesis
    plus = pipeline_mode_select("guided_plus", "test", plus_p=0.8)
    assert plus.background is Background.SCALE and plus.scale == 0.8


def test_mode_select_rejects_unknown_values():
    with pytest.raises(ModeError, match="pipeline mode"):
        pipeline_mode_select("sparse", "test")
    with pytest.raises(ModeError, match="phase"):
        pipeline_mode_select("guided", "eval")


def test_detector_modes_agree_in_degenerate_cases(rng):
    detector = ToyDetector.create(seed=3)
    image = Tensor(rng.random((1, 1, 64, 64)).astype(np.float32))
    mask = GuidanceMask(rng.random((2, 2)) < 0.5)
    mask.grid[0, 0] = True

    dense, _ = detector.forward(image, pipeline_mode_select("dense", "test"))
    guided_full, _ = detector.forward(image, pipeline_mode_select("guided", "test"), GuidanceMask.full(64, 64))
    np.testing.assert_array_equal(guided_full, dense)

    guided, _ = detector.forward(image, pipeline_mode_select("guided", "test"), mask)
    plus0, _ = detector.forward(image, pipeline_mode_select("guided_plus", "test", plus_p=0.0), mask)
    np.testing.assert_array_equal(plus0, guided)
    plus1, _ = detector.forward(image, pipeline_mode_select("guided_plus", "test", plus_p=1.0), mask)
    np.testing.assert_array_equal(plus1, dense)


def test_guided_conv_uses_scaled_semantics_at_single_layer(rng):
    # 单层上 guided 与 guided_plus(p=0) 在掩码内一致
    layer = ConvLayer(Tensor(rng.standard_normal((2, 1, 3, 3))), np.zeros(2), padding=1)
    x = Tensor(rng.standard_normal((1, 1, 16, 16)))
    view = MaskView(rng.random((16, 16)) < 0.5)
    guided = guided_conv2d(x, layer, view).data
    plus = scale_background(dense_conv2d(x, layer), view, 0.0).data
    np.testing.assert_array_equal(guided, plus)
