# test_guidance_net.py - 引导子网络测试
import math

import numpy as np
import pytest

from conftest import check_gradients, relative_error
from core_system import ConfigurationError, DatasetError, DimensionError, GuidanceConfig
from data_models import BBox, GuidanceMap, GuidanceMask, Precision, Sample
from guidance_net import (
    ContextModule, GuidanceNet, GuidanceTrainer, bce_loss_and_grad, binarize, context_forward,
    dataset_pr_sweep, gt_mask_from_boxes, mask_metrics, pr_sweep
)
from tensor_core import (
    ConvLayer, Tensor, avg_pool2d, crop, dense_conv2d, l2_normalize_channels, nearest_upsample, sigmoid_array
)


def random_box(rng, w, h):
    x = float(rng.uniform(-10, w))
    y = float(rng.uniform(-10, h))
    return BBox(x, y, float(rng.uniform(0.5, 80)), float(rng.uniform(0.5, 80)))


def brute_force_gt(w, h, boxes, cell=32):
    hm, wm = -(-h // cell), -(-w // cell)
    grid = np.zeros((hm, wm), dtype=bool)
    for y in range(hm):
        for x in range(wm):
            top, left = max(cell * y - 16, 0), max(cell * x - 16, 0)
            bottom, right = min(cell * y - 16 + cell, h), min(cell * x - 16 + cell, w)
            for b in boxes:
                iw = min(right, b.x2) - max(left, b.x)
                ih = min(bottom, b.y2) - max(top, b.y)
                if iw > 0 and ih > 0:
                    grid[y, x] = True
                    break
    return grid


# ===== 真值掩码 =====
def test_gt_mask_degenerate_cases():
    assert not gt_mask_from_boxes(100, 70, []).grid.any()
    full = gt_mask_from_boxes(100, 70, [BBox(0, 0, 100, 70)])
    assert full.shape == (3, 4) and full.grid.all()


def test_gt_mask_touching_edge_does_not_count():
    # 格子 (0,1) 覆盖列 [16, 48)，框恰好止于 16
    mask = gt_mask_from_boxes(64, 64, [BBox(0, 0, 16, 10)])
    assert mask.grid[0, 0] and not mask.grid[0, 1]


def test_gt_mask_matches_brute_force(rng):
    for _ in range(1000):
        w, h = int(rng.integers(1, 200)), int(rng.integers(1, 200))
        boxes = [random_box(rng, w, h) for _ in range(int(rng.integers(0, 4)))]
        np.testing.assert_array_equal(gt_mask_from_boxes(w, h, boxes).grid, brute_force_gt(w, h, boxes))


# ===== 上下文模块 =====
def _predictors(rng, levels, channels=6, zero=False):
    layers = []
    for _ in range(levels):
        w = np.zeros((1, channels, 1, 1)) if zero else rng.standard_normal((1, channels, 1, 1))
        layers.append(ConvLayer(Tensor(w), np.zeros(1) if zero else rng.standard_normal(1)))
    return ContextModule(layers)


def test_context_zero_predictors_give_half(rng):
    out = context_forward(Tensor(rng.standard_normal((1, 6, 5, 7))), _predictors(rng, 3, zero=True))
    np.testing.assert_array_equal(out.probabilities, 0.5)
    assert out.shape == (5, 7)


def test_context_constant_features_give_constant_map(rng):
    features = Tensor(np.broadcast_to(rng.standard_normal((1, 6, 1, 1)), (1, 6, 5, 7)).copy())
    probs = context_forward(features, _predictors(rng, 3)).probabilities
    np.testing.assert_allclose(probs, probs[0, 0], rtol=1e-12)


def test_context_sums_independent_levels(rng):
    features = Tensor(rng.standard_normal((1, 6, 5, 7)))
    module = _predictors(rng, 3)
    total = np.zeros((5, 7))
    for level, predictor in enumerate(module.predictors):
        x = features
        for _ in range(level):
            x = avg_pool2d(x, 2, 2)
        pred = dense_conv2d(l2_normalize_channels(x), predictor)
        total += crop(nearest_upsample(pred, 2 ** level), 5, 7).data[0, 0]
    out = context_forward(features, module)
    assert relative_error(out.logits, total) < 1e-6
    np.testing.assert_allclose(out.probabilities, sigmoid_array(total), rtol=1e-6)


def test_context_module_rejects_bad_levels(rng):
    with pytest.raises(ConfigurationError):
        _predictors(rng, 2)


# ===== 损失 / 二值化 / 指标 =====
def test_bce_examples(rng):
    gt = GuidanceMask(rng.random((4, 5)) < 0.5)
    loss, _ = bce_loss_and_grad(np.zeros((4, 5)), gt)
    assert loss == pytest.approx(math.log(2))
    perfect = np.where(gt.grid, 50.0, -50.0)
    assert bce_loss_and_grad(perfect, gt)[0] < 1e-3
    with pytest.raises(DimensionError):
        bce_loss_and_grad(np.zeros((3, 5)), gt)


def test_bce_gradient_finite_differences(rng):
    z = rng.standard_normal((4, 6)) * 2
    gt = GuidanceMask(rng.random((4, 6)) < 0.4)
    _, grad = bce_loss_and_grad(z, gt)
    err = check_gradients(lambda: bce_loss_and_grad(z, gt)[0], [z], [grad], rng, samples=24)
    assert err < 1e-5


def test_binarize_rules_and_nesting(rng):
    half = GuidanceMap(np.full((3, 3), 0.5))
    assert binarize(half, 0.2).grid.all()
    tiny = GuidanceMap(np.array([[0.0, 1e-9]]))
    np.testing.assert_array_equal(binarize(tiny, 1e-12).grid, [[False, True]])
    for tau in (0.0, 1.0, -0.1):
        with pytest.raises(ConfigurationError):
            binarize(half, tau)

    for _ in range(20):
        gmap = GuidanceMap(rng.random((6, 8)))
        masks = [binarize(gmap, tau).grid for tau in (0.1, 0.2, 0.3, 0.4)]
        for looser, tighter in zip(masks, masks[1:]):
            assert (tighter <= looser).all()


def test_mask_metrics(rng):
    gt = GuidanceMask(rng.random((8, 8)) < 0.3)
    gt.grid[0, 0] = True
    assert mask_metrics(gt, gt) == (1.0, 1.0)
    recall, precision = mask_metrics(GuidanceMask(np.ones((8, 8), dtype=bool)), gt)
    assert recall == 1.0 and precision == pytest.approx(gt.area_ratio)

    pred = GuidanceMask(rng.random((8, 8)) < 0.5)
    tp = np.sum(pred.grid & gt.grid)
    assert mask_metrics(pred, gt) == (tp / gt.true_cells, tp / pred.true_cells)
    empty = GuidanceMask(np.zeros((8, 8), dtype=bool))
    assert mask_metrics(empty, empty) == (1.0, 1.0)


def test_pr_sweep_monotone(rng):
    for _ in range(20):
        gmap = GuidanceMap(rng.random((6, 6)))
        gt = GuidanceMask(rng.random((6, 6)) < 0.4)
        rows = pr_sweep(gmap, gt, [0.4, 0.1, 0.3, 0.2])
        assert [r[0] for r in rows] == [0.1, 0.2, 0.3, 0.4]
        recalls = [r[1] for r in rows]
        areas = [r[3] for r in rows]
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))
        assert all(a >= b for a, b in zip(areas, areas[1:]))

    gmap = GuidanceMap(rng.random((4, 4)))
    gt = GuidanceMask(rng.random((4, 4)) < 0.5)
    (_, recall, precision, area), = pr_sweep(gmap, gt, [0.3])
    assert (recall, precision) == mask_metrics(binarize(gmap, 0.3), gt)
    assert area == binarize(gmap, 0.3).area_ratio


def test_dataset_pr_sweep_accumulates_counts():
    maps = [GuidanceMap(np.array([[0.9, 0.1]])), GuidanceMap(np.array([[0.9, 0.9]]))]
    gts = [GuidanceMask(np.array([[True, True]])), GuidanceMask(np.array([[True, False]]))]
    (tau, recall, precision, area), = dataset_pr_sweep(maps, gts, [0.5])
    # TP=2, FN=1, FP=1
    assert recall == pytest.approx(2 / 3) and precision == pytest.approx(2 / 3) and area == 0.75


# ===== 引导网络 =====
def test_guidance_net_output_is_one_thirty_second():
    net = GuidanceNet.create(seed=0)
    gmap = net.predict(Tensor(np.zeros((1, 1, 96, 160), dtype=np.float32)))
    assert gmap.shape == (3, 5)
    assert net.predict_mask(Tensor(np.zeros((1, 1, 96, 160), dtype=np.float32))).shape == (3, 5)


def test_guidance_net_rejects_bad_tau():
    with pytest.raises(ConfigurationError):
        GuidanceNet.create(tau=1.0)


def test_from_arrays_rebuilds_network(rng):
    net = GuidanceNet.create(seed=5, context_levels=1)
    arrays = [(l.weights.data, l.bias) for l in net.layers()]
    clone = GuidanceNet.from_arrays(arrays)
    image = Tensor(rng.random((1, 1, 64, 64)).astype(np.float32))
    np.testing.assert_array_equal(clone.predict(image).logits, net.predict(image).logits)
    assert clone.context.levels == 1
    with pytest.raises(DimensionError):
        GuidanceNet.from_arrays(arrays[:-2])


def test_full_guidance_net_gradient_check(rng):
    net = GuidanceNet.create(seed=1, precision=Precision.FP64)
    for layer in net.layers():
        layer.bias[:] = rng.standard_normal(layer.bias.shape) * 0.1
    image = Tensor(rng.random((1, 1, 128, 128)))
    gt = GuidanceMask(rng.random((4, 4)) < 0.4)

    _, grads = net.loss_and_gradients(image, gt)

    def loss():
        return net.loss_and_gradients(image, gt)[0]

    params, analytic = [], []
    for layer, (gw, gb) in zip(net.layers(), grads):
        params += [layer.weights.data, layer.bias]
        analytic += [gw, gb]
    assert check_gradients(loss, params, analytic, rng, samples=4) < 1e-5


# ===== 训练 =====
def _samples(rng, count=2, size=128):
    out = []
    for i in range(count):
        img = np.full((size, size), 0.5)
        y, x = rng.integers(0, size - 24, size=2)
        img[y:y + 16, x:x + 24] = (np.arange(24) // 2 % 2)[None, :]
        out.append(Sample(f"{i:05d}", Tensor(img[None, None].astype(np.float32)),
                          [BBox(float(x), float(y), 24.0, 16.0)]))
    return out


def test_trainer_is_deterministic_and_reduces_loss(rng):
    samples = _samples(rng)
    cfg = GuidanceConfig(epochs=4)
    first = GuidanceTrainer(cfg, seed=3).train(samples)
    second = GuidanceTrainer(cfg, seed=3).train(samples)
    for a, b in zip(first.layers(), second.layers()):
        np.testing.assert_array_equal(a.weights.data, b.weights.data)
        np.testing.assert_array_equal(a.bias, b.bias)

    untrained = GuidanceNet.create(seed=3)
    assert GuidanceTrainer.mean_loss(first, samples) < GuidanceTrainer.mean_loss(untrained, samples)


def test_trainer_iter_size_accumulates(rng):
    samples = _samples(rng, count=3)
    trainer = GuidanceTrainer(GuidanceConfig(epochs=2, iter_size=2), seed=0)
    trainer.train(samples)
    assert len(trainer.history) == 2


def test_trainer_rejects_empty_dataset():
    with pytest.raises(DatasetError):
        GuidanceTrainer(GuidanceConfig()).train([])


@pytest.mark.slow
def test_single_image_overfit(rng):
    samples = _samples(rng, count=1)
    cfg = GuidanceConfig(epochs=2000, learning_rate=0.02, lr_decay_points=[0.9])
    net = GuidanceTrainer(cfg, seed=0).train(samples)
    assert GuidanceTrainer.mean_loss(net, samples) < 0.05
