# guidance_net.py - 引导子网络：真值掩码、特征栈、金字塔上下文模块与训练
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core_system import ConfigurationError, DatasetError, DimensionError, GuidanceConfig
from data_models import BBox, GuidanceMap, GuidanceMask, Precision, Sample
from tensor_core import (
    ConvLayer, MomentumSGD, Tensor, avg_pool2d, avg_pool2d_backward, crop, dense_conv2d,
    dense_conv2d_backward, l2_normalize_backward, l2_normalize_channels, nearest_upsample,
    nearest_upsample_backward, relu, relu_backward, sigmoid_array
)

logger = logging.getLogger(__name__)

MASK_CELL = 32

LayerGrads = List[Tuple[np.ndarray, np.ndarray]]


# ===== 真值掩码 =====
def gt_mask_from_boxes(image_w: int, image_h: int, boxes: Iterable[BBox],
                       cell_size: int = MASK_CELL) -> GuidanceMask:
    """格子矩形 (32y-16, 32x-16, 32, 32) 裁剪到图像后与任一文本框有正面积交集即为 true"""
    if image_w < 1 or image_h < 1:
        raise DimensionError(f"image must be at least 1x1, got {(image_h, image_w)}")
    hm, wm = GuidanceMask.grid_shape(image_h, image_w, cell_size)
    half = cell_size // 2
    top = np.clip(np.arange(hm) * cell_size - half, 0, image_h)
    bottom = np.clip(np.arange(hm) * cell_size - half + cell_size, 0, image_h)
    left = np.clip(np.arange(wm) * cell_size - half, 0, image_w)
    right = np.clip(np.arange(wm) * cell_size - half + cell_size, 0, image_w)

    grid = np.zeros((hm, wm), dtype=bool)
    for box in boxes:
        # 行列可分：格子与框相交当且仅当行区间与列区间都有正长度重叠
        row_hit = (np.minimum(bottom, box.y2) - np.maximum(top, box.y)) > 0
        col_hit = (np.minimum(right, box.x2) - np.maximum(left, box.x)) > 0
        grid |= np.outer(row_hit, col_hit)
    return GuidanceMask(grid, cell_size)


# ===== 上下文模块 =====
@dataclass
class ContextModule:
    """金字塔上下文模块：各层 L2 归一化 -> 1x1 预测 -> 上采样，logits 逐元素相加"""
    predictors: List[ConvLayer]
    epsilon: float = 1e-12

    def __post_init__(self):
        if len(self.predictors) not in (1, 3):
            raise ConfigurationError(f"context module needs 1 or 3 levels, got {len(self.predictors)}")
        for p in self.predictors:
            if p.out_channels != 1 or p.kernel_h != 1 or p.kernel_w != 1:
                raise DimensionError(f"predictor must be a 1x1 conv to one channel, got {p.weights.shape}")

    @property
    def levels(self) -> int:
        return len(self.predictors)

    def forward(self, features: Tensor) -> Tuple[Tensor, list]:
        hm, wm = features.h, features.w
        total = None
        caches = []
        for level, predictor in enumerate(self.predictors):
            pooled = [features]
            for _ in range(level):
                pooled.append(avg_pool2d(pooled[-1], 2, 2))
            normed = l2_normalize_channels(pooled[-1], self.epsilon)
            pred = dense_conv2d(normed, predictor)
            out = crop(nearest_upsample(pred, 2 ** level), hm, wm) if level else pred
            total = out.data.copy() if total is None else total + out.data
            caches.append((pooled, normed, pred))
        return Tensor(total), caches

    def backward(self, grad_logits: Tensor, caches: list) -> Tuple[Tensor, LayerGrads]:
        features = caches[0][0][0]
        grad_features = np.zeros_like(features.data)
        grads = []
        for level, (predictor, (pooled, normed, pred)) in enumerate(zip(self.predictors, caches)):
            g = nearest_upsample_backward(grad_logits, pred.shape, 2 ** level) if level else grad_logits
            gx, gw, gb = dense_conv2d_backward(g, normed, predictor)
            g = l2_normalize_backward(gx, pooled[-1], self.epsilon)
            for k in range(level, 0, -1):
                g = avg_pool2d_backward(g, pooled[k - 1].shape, 2, 2)
            grad_features += g.data
            grads.append((gw, gb))
        return Tensor(grad_features), grads


def context_forward(features: Tensor, params: ContextModule) -> GuidanceMap:
    """单张特征图的引导概率图"""
    if features.n != 1:
        raise DimensionError(f"context_forward expects a single feature map, got batch {features.n}")
    logits, _ = params.forward(features)
    z = logits.data[0, 0]
    return GuidanceMap(sigmoid_array(z), z)


# ===== 损失 / 二值化 / 指标 =====
def bce_loss_and_grad(logits: np.ndarray, gt: GuidanceMask) -> Tuple[float, np.ndarray]:
    """逐格平均的二元交叉熵，梯度 (sigmoid(z) - y) / N"""
    z = np.asarray(logits)
    if z.shape != gt.shape:
        raise DimensionError(f"logits shape {z.shape} does not match mask shape {gt.shape}")
    y = gt.grid.astype(z.dtype)
    n = z.size
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid_array(z) - y) / n
    return float(loss.sum() / n), grad


def _check_tau(tau: float):
    if not 0.0 < tau < 1.0:
        raise ConfigurationError(f"threshold tau must be in (0, 1), got {tau}")


def binarize(guidance_map: GuidanceMap, tau: float) -> GuidanceMask:
    _check_tau(tau)
    return GuidanceMask(guidance_map.probabilities >= tau, MASK_CELL)


def _confusion(pred: GuidanceMask, gt: GuidanceMask) -> Tuple[int, int, int]:
    if pred.shape != gt.shape:
        raise DimensionError(f"predicted mask shape {pred.shape} does not match ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred.grid & gt.grid))
    fp = int(np.count_nonzero(pred.grid & ~gt.grid))
    fn = int(np.count_nonzero(~pred.grid & gt.grid))
    return tp, fp, fn


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def mask_metrics(pred: GuidanceMask, gt: GuidanceMask) -> Tuple[float, float]:
    """(recall, precision)，分母为 0 时记为 1.0"""
    tp, fp, fn = _confusion(pred, gt)
    return _ratio(tp, tp + fn), _ratio(tp, tp + fp)


def pr_sweep(guidance_map: GuidanceMap, gt: GuidanceMask,
             taus: Sequence[float]) -> List[Tuple[float, float, float, float]]:
    """每个 tau 的 (tau, recall, precision, area_ratio)"""
    return dataset_pr_sweep([guidance_map], [gt], taus)


def dataset_pr_sweep(maps: Sequence[GuidanceMap], gts: Sequence[GuidanceMask],
                     taus: Sequence[float]) -> List[Tuple[float, float, float, float]]:
    """在整个数据集上累计 TP/FP/FN 后再求比例"""
    rows = []
    for tau in sorted(taus):
        tp = fp = fn = cells = area = 0
        for guidance_map, gt in zip(maps, gts):
            pred = binarize(guidance_map, tau)
            t, f, n = _confusion(pred, gt)
            tp, fp, fn = tp + t, fp + f, fn + n
            area += pred.true_cells
            cells += pred.grid.size
        rows.append((float(tau), _ratio(tp, tp + fn), _ratio(tp, tp + fp), area / cells if cells else 0.0))
    return rows


# ===== 引导网络 =====
class GuidanceNet:
    """引导子网络：5 个 3x3/2 卷积块得到 1/32 特征，再接金字塔上下文模块"""

    CHANNELS = (1, 8, 16, 16, 32, 32)

    def __init__(self, features: List[ConvLayer], context: ContextModule, tau: float = 0.2):
        _check_tau(tau)
        if len(features) != len(self.CHANNELS) - 1:
            raise DimensionError(f"feature stack needs {len(self.CHANNELS) - 1} layers, got {len(features)}")
        for layer, cin, cout in zip(features, self.CHANNELS[:-1], self.CHANNELS[1:]):
            if layer.weights.shape != (cout, cin, 3, 3):
                raise DimensionError(f"unexpected feature layer shape {layer.weights.shape}")
        self.features = features
        self.context = context
        self.tau = tau
        self.logger = logging.getLogger(__name__)

    @classmethod
    def create(cls, seed: int = 0, precision: Precision = Precision.FP32, tau: float = 0.2,
               context_levels: int = 3, epsilon: float = 1e-12) -> "GuidanceNet":
        rng = np.random.Generator(np.random.Philox(seed))
        features = [
            ConvLayer.create(cout, cin, 3, stride=2, padding=1, rng=rng, precision=precision)
            for cin, cout in zip(cls.CHANNELS[:-1], cls.CHANNELS[1:])
        ]
        predictors = [
            ConvLayer.create(1, cls.CHANNELS[-1], 1, rng=rng, precision=precision)
            for _ in range(context_levels)
        ]
        return cls(features, ContextModule(predictors, epsilon), tau)

    @classmethod
    def from_arrays(cls, arrays: Sequence[Tuple[np.ndarray, np.ndarray]], tau: float = 0.2,
                    epsilon: float = 1e-12) -> "GuidanceNet":
        """由权重文件中的 (weights, bias) 列表重建网络"""
        n_feat = len(cls.CHANNELS) - 1
        if len(arrays) not in (n_feat + 1, n_feat + 3):
            raise DimensionError(f"guidance weights must hold {n_feat + 1} or {n_feat + 3} layers, got {len(arrays)}")
        features = [ConvLayer(Tensor(w), b, stride=2, padding=1) for w, b in arrays[:n_feat]]
        predictors = [ConvLayer(Tensor(w), b) for w, b in arrays[n_feat:]]
        return cls(features, ContextModule(predictors, epsilon), tau)

    def layers(self) -> List[ConvLayer]:
        return self.features + self.context.predictors

    @property
    def precision(self) -> Precision:
        return self.features[0].precision

    def forward(self, image: Tensor) -> Tuple[Tensor, dict]:
        x = image
        inputs, pres = [], []
        for layer in self.features:
            inputs.append(x)
            z = dense_conv2d(x, layer)
            pres.append(z)
            x = relu(z)
        logits, ctx = self.context.forward(x)
        return logits, {'inputs': inputs, 'pres': pres, 'context': ctx}

    def backward(self, grad_logits: Tensor, cache: dict) -> LayerGrads:
        g, ctx_grads = self.context.backward(grad_logits, cache['context'])
        feat_grads = []
        for layer, x, z in zip(reversed(self.features), reversed(cache['inputs']), reversed(cache['pres'])):
            g = relu_backward(g, z)
            g, gw, gb = dense_conv2d_backward(g, x, layer)
            feat_grads.append((gw, gb))
        return feat_grads[::-1] + ctx_grads

    def predict(self, image: Tensor) -> GuidanceMap:
        if image.n != 1:
            raise DimensionError(f"predict expects a single image, got batch {image.n}")
        logits, _ = self.forward(image.astype(self.precision))
        z = logits.data[0, 0]
        return GuidanceMap(sigmoid_array(z), z)

    def predict_mask(self, image: Tensor, tau: Optional[float] = None) -> GuidanceMask:
        """预测并二值化为引导掩码"""
        return binarize(self.predict(image), self.tau if tau is None else tau)

    def loss_and_gradients(self, image: Tensor, gt: GuidanceMask) -> Tuple[float, LayerGrads]:
        logits, cache = self.forward(image)
        loss, grad = bce_loss_and_grad(logits.data[0, 0], gt)
        return loss, self.backward(Tensor(grad[None, None]), cache)


@dataclass
class GuidanceTrainer:
    """引导网络训练器：SGD + 动量，多步学习率，iter_size 梯度累积"""
    config: GuidanceConfig
    seed: int = 0
    precision: Precision = Precision.FP32
    epsilon: float = 1e-12
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.logger = logging.getLogger(__name__)

    def train(self, samples: Sequence[Sample]) -> GuidanceNet:
        if not samples:
            raise DatasetError("cannot train the guidance net on an empty dataset")
        cfg = self.config
        net = GuidanceNet.create(self.seed, self.precision, cfg.tau, cfg.context_levels, self.epsilon)
        images = [s.image.astype(self.precision) for s in samples]
        targets = [gt_mask_from_boxes(img.w, img.h, s.boxes) for img, s in zip(images, samples)]

        steps_per_epoch = math.ceil(len(samples) / cfg.iter_size)
        optimizer = MomentumSGD(net.layers(), cfg.learning_rate, cfg.momentum,
                                cfg.epochs * steps_per_epoch, cfg.lr_decay_points, cfg.lr_decay_factor)
        order_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, 1])))
        self.history = []

        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(samples))
            losses = []
            for start in range(0, len(order), cfg.iter_size):
                batch = order[start:start + cfg.iter_size]
                acc = None
                for idx in batch:
                    loss, grads = net.loss_and_gradients(images[idx], targets[idx])
                    losses.append(loss)
                    if acc is None:
                        acc = [(gw.copy(), gb.copy()) for gw, gb in grads]
                    else:
                        for (aw, ab), (gw, gb) in zip(acc, grads):
                            aw += gw
                            ab += gb
                optimizer.step([(aw / len(batch), ab / len(batch)) for aw, ab in acc])
            self.history.append(float(np.mean(losses)))
            self.logger.info(f"guidance epoch {epoch + 1}/{cfg.epochs}: mean loss {self.history[-1]:.5f}")
        return net

    @staticmethod
    def mean_loss(net: GuidanceNet, samples: Sequence[Sample]) -> float:
        losses = []
        for s in samples:
            img = s.image.astype(net.precision)
            logits, _ = net.forward(img)
            loss, _ = bce_loss_and_grad(logits.data[0, 0], gt_mask_from_boxes(img.w, img.h, s.boxes))
            losses.append(loss)
        return float(np.mean(losses)) if losses else 0.0
