# core_system.py - 核心系统模块：配置、异常、日志
import json
import logging
import sys
import traceback
from datetime import datetime
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional

import coloredlogs
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator


# ===== 异常处理 =====
class GuidedCNNError(Exception):
    """系统异常基类"""
    code = "internal"
    exit_status = 1


class ConfigurationError(GuidedCNNError):
    """配置错误"""
    code = "config"
    exit_status = 3


class DimensionError(GuidedCNNError):
    """张量形状不匹配"""
    code = "dimension"
    exit_status = 5


class FormatError(GuidedCNNError):
    """文件格式错误"""
    code = "format"
    exit_status = 6


class DatasetError(GuidedCNNError):
    """数据集错误"""
    code = "dataset"
    exit_status = 7


class ArtifactMissingError(GuidedCNNError):
    """缺少产物文件"""
    code = "missing"
    exit_status = 4

    def __init__(self, missing: List[str]):
        self.missing = list(missing)
        super().__init__(f"missing artifacts: {', '.join(self.missing)}")


class ModeError(GuidedCNNError):
    """运行模式错误"""
    code = "mode"
    exit_status = 8


class CLIUsageError(GuidedCNNError):
    """命令行用法错误"""
    code = "usage"
    exit_status = 2


def handle_exceptions(func):
    """异常处理装饰器"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except GuidedCNNError:
            logging.debug(traceback.format_exc())
            raise
        except Exception as e:
            logging.error(f"Exception in {func.__name__}: {e}")
            logging.debug(traceback.format_exc())
            raise GuidedCNNError(f"Error in {func.__name__}: {e}") from e
    return wrapper


# ===== 配置模型 =====
class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataConfig(_Section):
    train_images: int = Field(500, ge=1)
    val_images: int = Field(100, ge=1)
    image_size: int = Field(256, ge=32)
    min_boxes: int = Field(1, ge=1)
    max_boxes: int = Field(6, ge=1)
    stripe_period: int = Field(4, ge=2)
    noise_level: float = Field(0.08, ge=0.0)
    margin: int = Field(16, ge=0)
    # 文本面积比例分桶权重 (0,10%] ... (40%,50%]
    bucket_weights: List[float] = Field(default_factory=lambda: [57.0, 21.0, 11.0, 6.0, 5.0])

    @field_validator("image_size")
    @classmethod
    def _multiple_of_32(cls, v: int) -> int:
        if v % 32:
            raise ValueError("image_size must be a multiple of 32")
        return v


class KernelConfig(_Section):
    precision: str = "fp32"
    l2_epsilon: float = Field(1e-12, gt=0.0)
    dilate_radius: int = Field(0, ge=0)

    @field_validator("precision")
    @classmethod
    def _known_precision(cls, v: str) -> str:
        if v not in ("fp32", "fp64"):
            raise ValueError("precision must be fp32 or fp64")
        return v


class GuidanceConfig(_Section):
    tau: float = Field(0.2, gt=0.0, lt=1.0)
    epochs: int = Field(8, ge=1)
    learning_rate: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    lr_decay_points: List[float] = Field(default_factory=lambda: [2.0 / 3.0])
    lr_decay_factor: float = Field(0.1, gt=0.0)
    iter_size: int = Field(1, ge=1)
    context_levels: int = 3
    tau_sweep: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4])

    @field_validator("context_levels")
    @classmethod
    def _levels(cls, v: int) -> int:
        if v not in (1, 3):
            raise ValueError("context_levels must be 1 or 3")
        return v


class SynthesisSection(_Section):
    p: float = Field(0.4, ge=0.0, le=1.0)
    seed: int = 0


class DetectorConfig(_Section):
    strategy: str = "gt_synthesis"
    epochs: int = Field(12, ge=1)
    learning_rate: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    lr_decay_points: List[float] = Field(default_factory=lambda: [2.0 / 3.0])
    lr_decay_factor: float = Field(0.1, gt=0.0)
    score_thresh: float = Field(0.5, gt=0.0, lt=1.0)
    nms_iou: float = Field(0.5, gt=0.0, lt=1.0)
    eval_iou: float = Field(0.5, gt=0.0, lt=1.0)
    regression_weight: float = Field(1.0, ge=0.0)
    plus_p: float = Field(0.8, ge=0.0, le=1.0)

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, v: str) -> str:
        known = ("dense", "predicted_no_retrain", "predicted_retrain", "predicted_synthesis", "gt_synthesis")
        if v not in known:
            raise ValueError(f"strategy must be one of {', '.join(known)}")
        return v


class BenchConfig(_Section):
    ratios: List[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25, 0.125])
    threads: List[int] = Field(default_factory=lambda: [1])
    repeats: int = Field(20, ge=1)
    warmup: int = Field(3, ge=0)
    channels: int = Field(64, ge=1)
    feature_size: int = Field(256, ge=32)
    kernel: int = Field(3, ge=1)
    pipeline_image_size: int = Field(256, ge=32)


class SweepConfig(_Section):
    p_values: List[float] = Field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])


class AppConfig(_Section):
    seed: int = 0
    threads: int = Field(1, ge=1)
    out_dir: str = "runs"
    log_level: str = "INFO"
    mode: str = "guided"
    data: DataConfig = Field(default_factory=DataConfig)
    kernels: KernelConfig = Field(default_factory=KernelConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    synthesis: SynthesisSection = Field(default_factory=SynthesisSection)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @field_validator("mode")
    @classmethod
    def _known_mode(cls, v: str) -> str:
        if v not in ("dense", "guided", "guided_plus"):
            raise ValueError("mode must be dense, guided or guided_plus")
        return v


def _describe_validation_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        key = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown config key: {key}")
        else:
            parts.append(f"invalid value for {key}: {err['msg']}")
    return "; ".join(parts)


# ===== 配置管理模块 =====
class ConfigManager:
    """统一配置管理器"""

    def __init__(self, config_path: Optional[str] = None):
        self.config_path = Path(config_path) if config_path else None
        self.config: AppConfig = AppConfig()
        self.logger = logging.getLogger(__name__)

    def load_config(self) -> AppConfig:
        """加载并校验配置文件"""
        if self.config_path is None:
            self.config = AppConfig()
            return self.config
        if not self.config_path.exists():
            raise ArtifactMissingError([str(self.config_path)])

        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse config {self.config_path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config root must be an object: {self.config_path}")

        self.config = self._validate(raw)
        self.logger.info(f"Loaded config from {self.config_path}")
        return self.config

    @staticmethod
    def _validate(raw: Dict[str, Any]) -> AppConfig:
        try:
            return AppConfig.model_validate(raw)
        except ValidationError as e:
            raise ConfigurationError(_describe_validation_error(e)) from e

    def get(self, key_path: str, default=None):
        """获取配置值"""
        value: Any = self.config
        for key in key_path.split("."):
            if isinstance(value, BaseModel) and key in type(value).model_fields:
                value = getattr(value, key)
            else:
                return default
        return value

    def update(self, key_path: str, value: Any):
        """更新配置值（重新校验）"""
        data = self.config.model_dump()
        keys = key_path.split(".")
        section = data
        for key in keys[:-1]:
            if not isinstance(section.get(key), dict):
                raise ConfigurationError(f"unknown config key: {key_path}")
            section = section[key]
        if keys[-1] not in section:
            raise ConfigurationError(f"unknown config key: {key_path}")

        section[keys[-1]] = value
        self.config = self._validate(data)

    def apply_overrides(self, assignments: List[str]):
        """应用 key=value 形式的命令行覆盖"""
        for item in assignments:
            if "=" not in item:
                raise ConfigurationError(f"override must look like key=value: {item}")
            key_path, text = item.split("=", 1)
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                value = text
            self.update(key_path.strip(), value)

    def save_config(self, path: Optional[str] = None):
        """保存配置到文件"""
        target = Path(path) if path else self.config_path
        if target is None:
            raise ConfigurationError("no config path to save to")
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8") as f:
            json.dump(self.config.model_dump(), f, indent=2)


# ===== 日志 =====
def setup_logging(level: str = "INFO", log_dir: Optional[str] = "logs") -> logging.Logger:
    """设置日志：文件 + 彩色控制台"""
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    root = logging.getLogger()
    root.setLevel(getattr(logging, level.upper(), logging.INFO))

    # 重复调用时替换之前的文件日志
    for handler in [h for h in root.handlers if getattr(h, "_guided_cnn", False)]:
        root.removeHandler(handler)
        handler.close()

    if log_dir:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(
            Path(log_dir) / f"guided_cnn_{datetime.now().strftime('%Y%m%d')}.log",
            encoding='utf-8'
        )
        file_handler.setFormatter(logging.Formatter(log_format))
        file_handler._guided_cnn = True
        root.addHandler(file_handler)

    coloredlogs.install(level=level.upper(), logger=root, fmt=log_format, stream=sys.stderr)
    return logging.getLogger("GuidedCNN")
