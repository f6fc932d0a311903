# data_models.py - 核心数据模型
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np


class Precision(Enum):
    FP32 = "fp32"
    FP64 = "fp64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.FP32 else np.dtype(np.float64)

    @classmethod
    def of(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.FP32
        if dtype == np.float64:
            return cls.FP64
        raise ValueError(f"unsupported element type: {dtype}")


class PipelineMode(Enum):
    DENSE = "dense"
    GUIDED = "guided"
    GUIDED_PLUS = "guided_plus"


class Phase(Enum):
    TRAIN = "train"
    TEST = "test"


class TrainingStrategy(Enum):
    DENSE = "dense"                                  # 原始骨干网络
    PREDICTED_NO_RETRAIN = "predicted_no_retrain"    # 密集训练，测试时套用预测掩码
    PREDICTED_RETRAIN = "predicted_retrain"          # 用预测掩码重新训练
    PREDICTED_SYNTHESIS = "predicted_synthesis"      # 预测掩码 + 随机合成
    GT_SYNTHESIS = "gt_synthesis"                    # 真值掩码 + 随机合成


class PointwiseOp(Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    SCALE = "scale"


class MaskSource(Enum):
    NONE = "none"
    GROUND_TRUTH = "ground_truth"
    PREDICTED = "predicted"


class Background(Enum):
    COMPUTE = "compute"   # 背景照常计算
    ZERO = "zero"         # 背景置零
    SCALE = "scale"       # 背景乘以 p


# 文本面积比例分桶 (下界, 上界]
TEXT_RATIO_BUCKETS: Tuple[Tuple[float, float], ...] = (
    (0.0, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.5),
)


@dataclass(frozen=True)
class BBox:
    """文本框 (像素坐标, 左上角 + 宽高)"""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError(f"box coordinates must be finite: {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive: {self}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def intersection_area(self, other: "BBox") -> float:
        iw = min(self.x2, other.x2) - max(self.x, other.x)
        ih = min(self.y2, other.y2) - max(self.y, other.y)
        if iw <= 0 or ih <= 0:
            return 0.0
        return iw * ih

    def iou(self, other: "BBox") -> float:
        inter = self.intersection_area(other)
        if inter == 0.0:
            return 0.0
        return inter / (self.area + other.area - inter)

    def to_dict(self) -> dict:
        return {'x': self.x, 'y': self.y, 'w': self.w, 'h': self.h}


@dataclass
class GuidanceMask:
    """引导掩码：每个格子对应输入图像的 cell_size x cell_size 区块"""
    grid: np.ndarray
    cell_size: int = 32

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {self.grid.shape}")
        if self.cell_size < 1:
            raise ValueError("cell_size must be positive")

    @staticmethod
    def grid_shape(image_h: int, image_w: int, cell_size: int = 32) -> Tuple[int, int]:
        return -(-image_h // cell_size), -(-image_w // cell_size)

    @classmethod
    def empty(cls, image_h: int, image_w: int, cell_size: int = 32) -> "GuidanceMask":
        return cls(np.zeros(cls.grid_shape(image_h, image_w, cell_size), dtype=bool), cell_size)

    @classmethod
    def full(cls, image_h: int, image_w: int, cell_size: int = 32) -> "GuidanceMask":
        return cls(np.ones(cls.grid_shape(image_h, image_w, cell_size), dtype=bool), cell_size)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    @property
    def true_cells(self) -> int:
        return int(self.grid.sum())

    @property
    def area_ratio(self) -> float:
        if self.grid.size == 0:
            return 0.0
        return self.true_cells / self.grid.size

    def to_dict(self) -> dict:
        return {
            'shape': list(self.grid.shape),
            'cell_size': self.cell_size,
            'true_cells': self.true_cells,
            'area_ratio': self.area_ratio
        }


@dataclass
class MaskView:
    """特征图分辨率下的掩码视图"""
    grid: np.ndarray
    stride: float = 1.0   # 每个特征格子对应的输入像素数

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2:
            raise ValueError(f"view grid must be 2-D, got shape {self.grid.shape}")

    @classmethod
    def full(cls, h: int, w: int, stride: float = 1.0) -> "MaskView":
        return cls(np.ones((h, w), dtype=bool), stride)

    @classmethod
    def empty(cls, h: int, w: int, stride: float = 1.0) -> "MaskView":
        return cls(np.zeros((h, w), dtype=bool), stride)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    @property
    def true_cells(self) -> int:
        return int(self.grid.sum())

    @property
    def area_ratio(self) -> float:
        if self.grid.size == 0:
            return 0.0
        return self.true_cells / self.grid.size

    def locations(self) -> Tuple[np.ndarray, np.ndarray]:
        """按行优先顺序返回所有 true 位置"""
        return np.nonzero(self.grid)


@dataclass
class GuidanceMap:
    """引导概率图"""
    probabilities: np.ndarray
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities)
        if self.probabilities.ndim != 2:
            raise ValueError("guidance map must be 2-D")
        if self.logits is not None and np.shape(self.logits) != self.probabilities.shape:
            raise ValueError("logits and probabilities must have the same shape")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.probabilities.shape


@dataclass(frozen=True)
class Detection:
    """检测结果"""
    box: BBox
    score: float

    def to_line(self) -> str:
        b = self.box
        return f"{b.x:.2f},{b.y:.2f},{b.w:.2f},{b.h:.2f},{self.score:.6f}"


@dataclass
class CellTarget:
    """检测头每个输出格子的训练目标"""
    labels: np.ndarray          # (Hf, Wf) 0/1
    deltas: np.ndarray          # (4, Hf, Wf): dx, dy, log dw, log dh
    cell_size: int = 16

    @property
    def positives(self) -> int:
        return int(self.labels.sum())


@dataclass(frozen=True)
class SynthesisConfig:
    """背景感知块随机合成配置"""
    p: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"synthesis probability must be in [0, 1], got {self.p}")


@dataclass(frozen=True)
class LayerPolicy:
    """主检测器各层的掩码接线策略"""
    mode: PipelineMode
    phase: Phase
    mask_source: MaskSource
    extend_with_synthesis: bool
    background: Background
    scale: float = 0.0

    @property
    def uses_mask(self) -> bool:
        return self.mask_source is not MaskSource.NONE


@dataclass
class SceneSpec:
    """合成场景参数"""
    height: int = 256
    width: int = 256
    bucket: int = 0
    min_boxes: int = 1
    max_boxes: int = 6
    stripe_period: int = 4
    noise_level: float = 0.08
    margin: int = 16
    seed: int = 0

    @property
    def ratio_range(self) -> Tuple[float, float]:
        return TEXT_RATIO_BUCKETS[self.bucket]


@dataclass
class BenchRecord:
    """一次计时 / 计算量测量"""
    layer_id: str
    mode: str
    mask_ratio: float
    wall_time_ns: int
    macs: int
    threads: int

    def to_dict(self) -> Dict[str, object]:
        return {
            'layer_id': self.layer_id,
            'mode': self.mode,
            'mask_ratio': self.mask_ratio,
            'macs': self.macs,
            'threads': self.threads,
            'wall_time_ns_nondet': self.wall_time_ns
        }


@dataclass
class Sample:
    """一张训练/验证图像及其标注"""
    name: str
    image: Any                    # tensor_core.Tensor, 1x1xHxW
    boxes: List[BBox] = field(default_factory=list)
