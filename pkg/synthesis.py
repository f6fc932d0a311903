# synthesis.py - 背景感知的块随机合成与 Guided+ 背景缩放
import logging
from typing import Union

import numpy as np

from core_system import ConfigurationError, DimensionError, ModeError
from data_models import (
    Background, GuidanceMask, LayerPolicy, MaskSource, MaskView, Phase, PipelineMode,
    SynthesisConfig, TrainingStrategy
)
from tensor_core import Tensor

logger = logging.getLogger(__name__)


def draw_seed(base_seed: int, epoch: int, index: int) -> int:
    """每张图每个 epoch 独立的合成种子"""
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1, np.uint64)[0])


def extend_mask_random(mask: GuidanceMask, cfg: SynthesisConfig) -> GuidanceMask:
    """每个背景格子以概率 p 独立翻转为 true；原有 true 格子保持不变"""
    # 基于计数器的生成器：结果只取决于种子
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    flips = rng.random(mask.shape) < cfg.p
    return GuidanceMask(mask.grid | flips, mask.cell_size)


def scale_background(features: Tensor, view: MaskView, p: float) -> Tensor:
    """掩码内不变，背景乘以 p"""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"scale must be in [0, 1], got {p}")
    if view.shape != (features.h, features.w):
        raise DimensionError(
            f"mask view shape {view.shape} does not match feature spatial shape {(features.h, features.w)}"
        )
    x = features.data
    return Tensor(np.where(view.grid, x, x * x.dtype.type(p)))


def _parse(enum_cls, value, what: str):
    try:
        return enum_cls(value)
    except ValueError:
        raise ModeError(f"invalid {what}: {value}") from None


def pipeline_mode_select(mode: Union[str, PipelineMode], phase: Union[str, Phase],
                         strategy: Union[str, TrainingStrategy] = TrainingStrategy.GT_SYNTHESIS,
                         plus_p: float = 0.8) -> LayerPolicy:
    """根据模式、阶段和训练策略决定主检测器各层的掩码接线"""
    mode = _parse(PipelineMode, mode, "pipeline mode")
    phase = _parse(Phase, phase, "phase")
    strategy = _parse(TrainingStrategy, strategy, "training strategy")
    dense = LayerPolicy(PipelineMode.DENSE, phase, MaskSource.NONE, False, Background.COMPUTE)

    if mode is PipelineMode.DENSE:
        return dense

    if phase is Phase.TRAIN:
        if strategy in (TrainingStrategy.DENSE, TrainingStrategy.PREDICTED_NO_RETRAIN):
            return dense
        source = MaskSource.GROUND_TRUTH if strategy is TrainingStrategy.GT_SYNTHESIS else MaskSource.PREDICTED
        extend = strategy in (TrainingStrategy.GT_SYNTHESIS, TrainingStrategy.PREDICTED_SYNTHESIS)
        return LayerPolicy(PipelineMode.GUIDED, phase, source, extend, Background.ZERO)

    # 测试时掩码不扩展
    if mode is PipelineMode.GUIDED:
        return LayerPolicy(mode, phase, MaskSource.PREDICTED, False, Background.ZERO)
    return LayerPolicy(mode, phase, MaskSource.PREDICTED, False, Background.SCALE, plus_p)
