# detector.py - 玩具文本检测器：稠密 / 引导 / Guided+ 前向、手写反向、解码与评估
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core_system import ArtifactMissingError, ConfigurationError, DatasetError, DimensionError, ModeError
from data_models import (
    Background, BBox, CellTarget, Detection, GuidanceMask, LayerPolicy, MaskView,
    Phase, PipelineMode, PointwiseOp, Precision, Sample, SynthesisConfig, TrainingStrategy
)
from guidance_net import GuidanceNet, gt_mask_from_boxes
from guided_kernels import (
    flop_count, guided_conv2d, guided_conv2d_backward, guided_pointwise, guided_pointwise_backward,
    mask_dilate, mask_project
)
from synthesis import draw_seed, extend_mask_random, pipeline_mode_select, scale_background
from tensor_core import (
    ConvLayer, MomentumSGD, Tensor, dense_conv2d, dense_conv2d_backward, relu, relu_backward, sigmoid_array
)

logger = logging.getLogger(__name__)

HEAD_STRIDE = 16

LayerGrads = List[Tuple[np.ndarray, np.ndarray]]


@dataclass
class ForwardCache:
    """反向传播所需的中间结果"""
    policy: LayerPolicy
    inputs: List[Tensor] = field(default_factory=list)
    pres: List[Tensor] = field(default_factory=list)
    views: List[Optional[MaskView]] = field(default_factory=list)


class ToyDetector:
    """单次前向的玩具检测器，输出步长 16，检测头 5 通道 (score, dx, dy, log dw, log dh)"""

    # (in, out, stride)
    BACKBONE = ((1, 16, 1), (16, 16, 2), (16, 32, 2), (32, 32, 2), (32, 64, 2))
    HEAD_CHANNELS = 5

    def __init__(self, layers: List[ConvLayer], dilate_radius: int = 0):
        if len(layers) != len(self.BACKBONE) + 1:
            raise DimensionError(f"detector needs {len(self.BACKBONE) + 1} layers, got {len(layers)}")
        for layer, (cin, cout, _) in zip(layers, self.BACKBONE):
            if layer.weights.shape != (cout, cin, 3, 3):
                raise DimensionError(f"unexpected backbone layer shape {layer.weights.shape}")
        if layers[-1].weights.shape != (self.HEAD_CHANNELS, self.BACKBONE[-1][1], 1, 1):
            raise DimensionError(f"unexpected head shape {layers[-1].weights.shape}")
        self.layers = layers
        self.dilate_radius = dilate_radius
        self.logger = logging.getLogger(__name__)

    @classmethod
    def create(cls, seed: int = 0, precision: Precision = Precision.FP32, dilate_radius: int = 0) -> "ToyDetector":
        rng = np.random.Generator(np.random.Philox(seed))
        layers = [
            ConvLayer.create(cout, cin, 3, stride=s, padding=1, rng=rng, precision=precision)
            for cin, cout, s in cls.BACKBONE
        ]
        head = ConvLayer.create(cls.HEAD_CHANNELS, cls.BACKBONE[-1][1], 1, rng=rng, precision=precision)
        # 回归分支从小权重开始
        head.weights.data[1:] *= 0.1
        layers.append(head)
        return cls(layers, dilate_radius)

    @classmethod
    def from_arrays(cls, arrays: Sequence[Tuple[np.ndarray, np.ndarray]], dilate_radius: int = 0) -> "ToyDetector":
        if len(arrays) != len(cls.BACKBONE) + 1:
            raise DimensionError(f"detector weights must hold {len(cls.BACKBONE) + 1} layers, got {len(arrays)}")
        layers = [ConvLayer(Tensor(w), b, stride=s, padding=1)
                  for (w, b), (_, _, s) in zip(arrays[:-1], cls.BACKBONE)]
        layers.append(ConvLayer(Tensor(arrays[-1][0]), arrays[-1][1]))
        return cls(layers, dilate_radius)

    @property
    def precision(self) -> Precision:
        return self.layers[0].precision

    def copy(self) -> "ToyDetector":
        return ToyDetector([l.copy() for l in self.layers], self.dilate_radius)

    def _views(self, image_h: int, image_w: int, mask: GuidanceMask) -> List[MaskView]:
        views = []
        h, w = image_h, image_w
        for layer in self.layers:
            h, w = layer.output_size(h, w)
            views.append(mask_dilate(mask_project(mask, h, w, image_h, image_w), self.dilate_radius))
        return views

    def head_view(self, image_h: int, image_w: int, mask: GuidanceMask) -> MaskView:
        return self._views(image_h, image_w, mask)[-1]

    # ===== 前向 / 反向 =====
    def forward(self, image: Tensor, policy: LayerPolicy, mask: Optional[GuidanceMask] = None,
                threads: int = 1) -> Tuple[np.ndarray, ForwardCache]:
        """返回检测头输出 (n, 5, Hf, Wf) 与缓存"""
        if policy.uses_mask and mask is None:
            raise ModeError(f"mode {policy.mode.value} requires a guidance mask")
        if image.c != 1:
            raise DimensionError(f"detector expects a grayscale image, got shape {image.shape}")

        cache = ForwardCache(policy)
        views = self._views(image.h, image.w, mask) if policy.uses_mask else [None] * len(self.layers)
        last = len(self.layers) - 1
        x = image
        for i, (layer, view) in enumerate(zip(self.layers, views)):
            cache.inputs.append(x)
            cache.views.append(view)
            if policy.background is Background.ZERO:
                z = guided_conv2d(x, layer, view, threads)
                x = guided_pointwise(PointwiseOp.RELU, z, view) if i < last else z
            else:
                z = dense_conv2d(x, layer, threads)
                x = relu(z) if i < last else z
                if policy.background is Background.SCALE:
                    x = scale_background(x, view, policy.scale)
            cache.pres.append(z)
        return x.data, cache

    def backward(self, grad_head: np.ndarray, cache: ForwardCache) -> LayerGrads:
        policy = cache.policy
        g = Tensor(grad_head)
        grads = []
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            layer, x, z, view = self.layers[i], cache.inputs[i], cache.pres[i], cache.views[i]
            if policy.background is Background.ZERO:
                if i < last:
                    g = guided_pointwise_backward(PointwiseOp.RELU, g, z, view)
                g, gw, gb = guided_conv2d_backward(g, x, layer, view)
            else:
                if policy.background is Background.SCALE:
                    g = guided_pointwise_backward(PointwiseOp.SCALE, g, z, view, policy.scale)
                if i < last:
                    g = relu_backward(g, z)
                g, gw, gb = dense_conv2d_backward(g, x, layer)
            grads.append((gw, gb))
        return grads[::-1]

    def loss_and_backprop(self, image: Tensor, targets: CellTarget, policy: LayerPolicy,
                          mask: Optional[GuidanceMask] = None,
                          regression_weight: float = 1.0) -> Tuple[float, LayerGrads]:
        head, cache = self.forward(image, policy, mask)
        view = cache.views[-1]
        loss, grad = detector_loss(head, targets, view, regression_weight)
        return loss, self.backward(grad, cache)

    def mac_count(self, image_h: int, image_w: int, policy: LayerPolicy,
                  mask: Optional[GuidanceMask] = None) -> int:
        """单张图的主检测器乘加次数"""
        guided = policy.background is Background.ZERO
        if guided and mask is None:
            raise ModeError(f"mode {policy.mode.value} requires a guidance mask")
        views = self._views(image_h, image_w, mask) if guided else [None] * len(self.layers)
        total = 0
        h, w = image_h, image_w
        for layer, view in zip(self.layers, views):
            h, w = layer.output_size(h, w)
            total += flop_count(layer, (1, layer.out_channels, h, w), view)
        return total

    def detect(self, image: Tensor, policy: LayerPolicy, mask: Optional[GuidanceMask] = None,
               score_thresh: float = 0.5, nms_iou: float = 0.5, threads: int = 1) -> List[Detection]:
        head, cache = self.forward(image.astype(self.precision), policy, mask, threads)
        # 背景未被计算（或被缩放为 0）时只在掩码内解码
        zeroed = policy.background is Background.ZERO or (policy.background is Background.SCALE and policy.scale == 0)
        valid = cache.views[-1].grid if zeroed else None
        return decode_and_nms(head[0, 0], head[0, 1:], score_thresh, nms_iou, valid)


# ===== 训练目标与损失 =====
def make_targets(image_h: int, image_w: int, boxes: Sequence[BBox], cell: int = HEAD_STRIDE) -> CellTarget:
    """格子中心严格落在框内即为正样本；多框时取与格子 IoU 最大者，平局取先出现的框"""
    hf, wf = -(-image_h // cell), -(-image_w // cell)
    labels = np.zeros((hf, wf), dtype=np.uint8)
    deltas = np.zeros((4, hf, wf))
    for y in range(hf):
        cy = cell * y + cell / 2
        for x in range(wf):
            cx = cell * x + cell / 2
            footprint = BBox(cell * x, cell * y, cell, cell)
            best, best_iou = None, -1.0
            for box in boxes:
                if box.x < cx < box.x2 and box.y < cy < box.y2:
                    iou = footprint.iou(box)
                    if iou > best_iou:
                        best, best_iou = box, iou
            if best is None:
                continue
            labels[y, x] = 1
            deltas[:, y, x] = (
                (best.x + best.w / 2 - cx) / cell,
                (best.y + best.h / 2 - cy) / cell,
                math.log(best.w / cell),
                math.log(best.h / cell),
            )
    return CellTarget(labels, deltas, cell)


def detector_loss(head: np.ndarray, targets: CellTarget, view: Optional[MaskView] = None,
                  regression_weight: float = 1.0) -> Tuple[float, np.ndarray]:
    """掩码内 score 的平均 BCE + λ * 正样本上 smooth-L1(β=1)；返回 (loss, d loss / d head)"""
    if head.ndim != 4 or head.shape[0] != 1 or head.shape[1] != ToyDetector.HEAD_CHANNELS:
        raise DimensionError(f"head output must be (1, 5, Hf, Wf), got {head.shape}")
    hf, wf = head.shape[2:]
    if targets.labels.shape != (hf, wf):
        raise DimensionError(f"targets shape {targets.labels.shape} does not match head shape {(hf, wf)}")
    inside = np.ones((hf, wf), dtype=bool) if view is None else view.grid
    if inside.shape != (hf, wf):
        raise DimensionError(f"mask view shape {inside.shape} does not match head shape {(hf, wf)}")

    grad = np.zeros_like(head)
    n_cells = int(inside.sum())
    if n_cells == 0:
        return 0.0, grad

    z = head[0, 0]
    y = targets.labels.astype(head.dtype)
    bce = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(bce[inside].sum() / n_cells)
    grad[0, 0] = np.where(inside, (sigmoid_array(z) - y) / n_cells, 0)

    positive = inside & (targets.labels > 0)
    n_pos = int(positive.sum())
    if n_pos and regression_weight > 0:
        d = head[0, 1:] - targets.deltas.astype(head.dtype)
        ad = np.abs(d)
        smooth = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
        loss += regression_weight * float(smooth[:, positive].sum() / n_pos)
        grad[0, 1:] = np.where(positive, regression_weight * np.clip(d, -1.0, 1.0) / n_pos, 0)
    return loss, grad


# ===== 解码 / NMS / 评估 =====
def _check_unit(name: str, value: float):
    if not 0.0 < value < 1.0:
        raise ConfigurationError(f"{name} must be in (0, 1), got {value}")


def _iou_one_to_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    x1 = np.maximum(box[0], others[:, 0])
    y1 = np.maximum(box[1], others[:, 1])
    x2 = np.minimum(box[0] + box[2], others[:, 0] + others[:, 2])
    y2 = np.minimum(box[1] + box[3], others[:, 1] + others[:, 3])
    inter = np.maximum(x2 - x1, 0) * np.maximum(y2 - y1, 0)
    union = box[2] * box[3] + others[:, 2] * others[:, 3] - inter
    return inter / union


def decode_and_nms(score_map: np.ndarray, delta_map: np.ndarray, score_thresh: float = 0.5,
                   iou_thresh: float = 0.5, valid: Optional[np.ndarray] = None,
                   cell: int = HEAD_STRIDE) -> List[Detection]:
    """sigmoid(score) >= 阈值的格子解码成框，贪心 NMS 抑制 IoU >= iou_thresh"""
    _check_unit("score_thresh", score_thresh)
    _check_unit("iou_thresh", iou_thresh)
    probs = sigmoid_array(np.asarray(score_map, dtype=np.float64))
    keep_mask = probs >= score_thresh
    if valid is not None:
        keep_mask &= valid
    ys, xs = np.nonzero(keep_mask)
    if len(ys) == 0:
        return []

    scores = probs[ys, xs]
    d = np.asarray(delta_map, dtype=np.float64)[:, ys, xs]
    cx = cell * xs + cell / 2 + d[0] * cell
    cy = cell * ys + cell / 2 + d[1] * cell
    w = cell * np.exp(d[2])
    h = cell * np.exp(d[3])
    boxes = np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)

    # 稳定排序：同分按 (y, x) 行优先
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        if rest.size == 0:
            break
        ious = _iou_one_to_many(boxes[i], boxes[rest])
        order = rest[ious < iou_thresh]

    return [Detection(BBox(*map(float, boxes[i])), float(scores[i])) for i in keep]


def match_counts(detections: Sequence[Detection], gt_boxes: Sequence[BBox],
                 iou_thresh: float = 0.5) -> Tuple[int, int, int]:
    """贪心一对一匹配，返回 (匹配数, 检测数, 真值数)"""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    matched = [False] * len(gt_boxes)
    tp = 0
    for i in order:
        box = detections[i].box
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gt_boxes):
            if matched[j]:
                continue
            iou = box.iou(gt)
            if iou >= iou_thresh and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            matched[best] = True
            tp += 1
    return tp, len(detections), len(gt_boxes)


def prf_from_counts(tp: int, n_det: int, n_gt: int) -> Tuple[float, float, float]:
    recall = 1.0 if n_gt == 0 else tp / n_gt
    precision = 1.0 if n_det == 0 else tp / n_det
    f = 0.0 if recall + precision == 0 else 2 * precision * recall / (precision + recall)
    return recall, precision, f


def evaluate(detections: Sequence[Detection], gt_boxes: Sequence[BBox],
             iou_thresh: float = 0.5) -> Tuple[float, float, float]:
    """(recall, precision, F)"""
    return prf_from_counts(*match_counts(detections, gt_boxes, iou_thresh))


# ===== 训练 =====
class DetectorTrainer:
    """按训练策略训练玩具检测器"""

    def __init__(self, config, seed: int = 0, precision: Precision = Precision.FP32,
                 synthesis_p: float = 0.4, synthesis_seed: int = 0, dilate_radius: int = 0,
                 tau: float = 0.2):
        self.config = config
        self.seed = seed
        self.precision = precision
        self.synthesis_p = synthesis_p
        self.synthesis_seed = synthesis_seed
        self.dilate_radius = dilate_radius
        self.tau = tau
        self.history: List[float] = []
        self.logger = logging.getLogger(__name__)

    def _masks(self, strategy: TrainingStrategy, images: List[Tensor], samples: Sequence[Sample],
               guidance: Optional[GuidanceNet]) -> List[Optional[GuidanceMask]]:
        if strategy is TrainingStrategy.GT_SYNTHESIS:
            return [gt_mask_from_boxes(img.w, img.h, s.boxes) for img, s in zip(images, samples)]
        if strategy in (TrainingStrategy.PREDICTED_RETRAIN, TrainingStrategy.PREDICTED_SYNTHESIS):
            if guidance is None:
                raise ArtifactMissingError(["guidance weights"])
            return [guidance.predict_mask(img, self.tau) for img in images]
        return [None] * len(images)

    def train(self, samples: Sequence[Sample], strategy=TrainingStrategy.GT_SYNTHESIS,
              guidance: Optional[GuidanceNet] = None) -> ToyDetector:
        if not samples:
            raise DatasetError("cannot train the detector on an empty dataset")
        strategy = TrainingStrategy(strategy)
        cfg = self.config
        policy = pipeline_mode_select(PipelineMode.GUIDED, Phase.TRAIN, strategy)
        detector = ToyDetector.create(self.seed, self.precision, self.dilate_radius)

        images = [s.image.astype(self.precision) for s in samples]
        targets = [make_targets(img.h, img.w, s.boxes) for img, s in zip(images, samples)]
        masks = self._masks(strategy, images, samples, guidance) if policy.uses_mask else [None] * len(images)

        optimizer = MomentumSGD(detector.layers, cfg.learning_rate, cfg.momentum,
                                cfg.epochs * len(samples), cfg.lr_decay_points, cfg.lr_decay_factor)
        order_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, 2])))
        self.history = []

        for epoch in range(cfg.epochs):
            losses = []
            for idx in order_rng.permutation(len(samples)):
                mask = masks[idx]
                if mask is not None and policy.extend_with_synthesis:
                    syn = SynthesisConfig(self.synthesis_p, draw_seed(self.synthesis_seed, epoch, int(idx)))
                    mask = extend_mask_random(mask, syn)
                loss, grads = detector.loss_and_backprop(images[idx], targets[idx], policy, mask,
                                                         cfg.regression_weight)
                optimizer.step(grads)
                losses.append(loss)
            self.history.append(float(np.mean(losses)))
            self.logger.info(
                f"detector [{strategy.value}] epoch {epoch + 1}/{cfg.epochs}: mean loss {self.history[-1]:.5f}"
            )
        return detector


def evaluate_dataset(detector: ToyDetector, samples: Sequence[Sample], policy: LayerPolicy,
                     masks: Optional[Sequence[Optional[GuidanceMask]]] = None, score_thresh: float = 0.5,
                     nms_iou: float = 0.5, eval_iou: float = 0.5, threads: int = 1) -> Dict[str, float]:
    """在数据集上累计匹配数并统计乘加次数"""
    masks = masks if masks is not None else [None] * len(samples)
    tp = n_det = n_gt = 0
    macs = dense_macs = 0
    dense_policy = pipeline_mode_select(PipelineMode.DENSE, Phase.TEST)
    for sample, mask in zip(samples, masks):
        img = sample.image
        dets = detector.detect(img, policy, mask, score_thresh, nms_iou, threads)
        t, d, g = match_counts(dets, sample.boxes, eval_iou)
        tp, n_det, n_gt = tp + t, n_det + d, n_gt + g
        macs += detector.mac_count(img.h, img.w, policy, mask)
        dense_macs += detector.mac_count(img.h, img.w, dense_policy)
    recall, precision, f = prf_from_counts(tp, n_det, n_gt)
    return {
        'recall': recall,
        'precision': precision,
        'f_measure': f,
        'macs': macs,
        'dense_macs': dense_macs,
        'mac_ratio': macs / dense_macs if dense_macs else 0.0
    }
