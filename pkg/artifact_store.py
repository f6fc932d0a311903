# artifact_store.py - 产物存储：张量、掩码、图像、标注、权重与报告文件
import json
import logging
import math
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from core_system import ArtifactMissingError, FormatError
from data_models import BBox, Detection, GuidanceMap, GuidanceMask, Sample
from tensor_core import Tensor, pad_to_multiple

PathLike = Union[str, Path]
LayerArrays = List[Tuple[np.ndarray, np.ndarray]]

TENSOR_MAGIC = b"GCT1"
MASK_MAGIC = b"GCM1"
WEIGHTS_MAGIC = b"GCW1"


# ===== 二进制编解码 =====
def encode_tensor(tensor: Tensor) -> bytes:
    """GCT1 | u8 元素宽度 | 4 x u32 维度 | 小端数据"""
    data = tensor.data
    header = TENSOR_MAGIC + struct.pack("<B4I", data.dtype.itemsize, *data.shape)
    return header + data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes()


def decode_tensor(blob: bytes) -> Tensor:
    if len(blob) < 21 or blob[:4] != TENSOR_MAGIC:
        raise FormatError("not a tensor file (bad magic or truncated header)")
    width, *dims = struct.unpack_from("<B4I", blob, 4)
    if width not in (4, 8):
        raise FormatError(f"unsupported tensor element width: {width}")
    count = math.prod(dims)
    payload = blob[21:]
    if len(payload) != count * width:
        raise FormatError(f"tensor payload has {len(payload)} bytes, expected {count * width}")
    dtype = np.dtype("<f4") if width == 4 else np.dtype("<f8")
    return Tensor(np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("=")))


def encode_mask(mask: GuidanceMask) -> bytes:
    """GCM1 | u32 Hm | u32 Wm | u32 cell_size | Hm*Wm 字节 (0/1)"""
    hm, wm = mask.shape
    return MASK_MAGIC + struct.pack("<3I", hm, wm, mask.cell_size) + mask.grid.astype(np.uint8).tobytes()


def decode_mask(blob: bytes) -> GuidanceMask:
    if len(blob) < 16 or blob[:4] != MASK_MAGIC:
        raise FormatError("not a mask file (bad magic or truncated header)")
    hm, wm, cell = struct.unpack_from("<3I", blob, 4)
    payload = np.frombuffer(blob[16:], dtype=np.uint8)
    if payload.size != hm * wm:
        raise FormatError(f"mask payload has {payload.size} cells, expected {hm * wm}")
    if (payload > 1).any():
        raise FormatError("mask cells must be 0 or 1")
    return GuidanceMask(payload.reshape(hm, wm).astype(bool), cell)


def encode_weights(layers: Sequence[Tuple[np.ndarray, np.ndarray]]) -> bytes:
    """GCW1 | u16 层数 | 每层 4 x u32 维度 + 权重 + 偏置（小端）"""
    parts = [WEIGHTS_MAGIC, struct.pack("<H", len(layers))]
    for weights, bias in layers:
        w = np.asarray(weights)
        if w.ndim != 4:
            raise FormatError(f"layer weights must be 4-D, got shape {w.shape}")
        le = w.dtype.newbyteorder("<")
        parts.append(struct.pack("<4I", *w.shape))
        parts.append(w.astype(le, copy=False).tobytes())
        parts.append(np.asarray(bias).astype(le, copy=False).tobytes())
    return b"".join(parts)


def _parse_weights(blob: bytes, count: int, width: int) -> Optional[LayerArrays]:
    dtype = np.dtype("<f4") if width == 4 else np.dtype("<f8")
    offset = 6
    layers = []
    for _ in range(count):
        if offset + 16 > len(blob):
            return None
        dims = struct.unpack_from("<4I", blob, offset)
        offset += 16
        # Python 整数，按错误宽度读出的超大维度不会溢出成负数
        n_w = math.prod(dims)
        n_b = dims[0]
        end = offset + (n_w + n_b) * width
        if end > len(blob):
            return None
        values = np.frombuffer(blob[offset:end], dtype=dtype).astype(dtype.newbyteorder("="))
        try:
            weights = values[:n_w].reshape(dims)
        except ValueError:
            return None
        layers.append((weights, values[n_w:].copy()))
        offset = end
    return layers if offset == len(blob) else None


def decode_weights(blob: bytes) -> LayerArrays:
    """元素宽度不在头部：按 4/8 字节各试一次，恰好一种能完整解析"""
    if len(blob) < 6 or blob[:4] != WEIGHTS_MAGIC:
        raise FormatError("not a weights file (bad magic or truncated header)")
    (count,) = struct.unpack_from("<H", blob, 4)
    if count == 0:
        if len(blob) != 6:
            raise FormatError("weights payload does not match its layer table")
        return []
    fits = [layers for layers in (_parse_weights(blob, count, w) for w in (4, 8)) if layers is not None]
    if len(fits) != 1:
        raise FormatError("weights payload does not match its layer table")
    return fits[0]


# ===== 文本格式 =====
def parse_box_line(line: str) -> BBox:
    parts = line.strip().split(",")
    if len(parts) != 4:
        raise FormatError(f"annotation line must be 'x,y,w,h': {line.strip()!r}")
    try:
        return BBox(*(float(p) for p in parts))
    except ValueError as e:
        raise FormatError(f"bad annotation line {line.strip()!r}: {e}") from e


def parse_detection_line(line: str) -> Detection:
    parts = line.strip().split(",")
    if len(parts) != 5:
        raise FormatError(f"detection line must be 'x,y,w,h,score': {line.strip()!r}")
    try:
        values = [float(p) for p in parts]
        return Detection(BBox(*values[:4]), values[4])
    except ValueError as e:
        raise FormatError(f"bad detection line {line.strip()!r}: {e}") from e


def format_number(v: float) -> str:
    return f"{v:.6g}" if v != int(v) else str(int(v))


class ArtifactStore:
    """轻量级文件产物管理器"""

    def __init__(self, root: PathLike = "."):
        self.root = Path(root)
        self.logger = logging.getLogger(__name__)

    def path(self, *parts: PathLike) -> Path:
        p = Path(*parts)
        return p if p.is_absolute() else self.root / p

    def require(self, paths: Iterable[PathLike]) -> List[Path]:
        """所有文件都必须存在，否则一次性列出缺失项"""
        resolved = [self.path(p) for p in paths]
        missing = [str(p) for p in resolved if not p.exists()]
        if missing:
            raise ArtifactMissingError(missing)
        return resolved

    def _write(self, path: PathLike, blob: bytes) -> Path:
        target = self.path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(blob)
        self.logger.debug(f"Wrote {target}")
        return target

    def _read(self, path: PathLike) -> bytes:
        (target,) = self.require([path])
        return target.read_bytes()

    # ===== 张量 / 掩码 / 权重 =====
    def save_tensor(self, path: PathLike, tensor: Tensor) -> Path:
        return self._write(path, encode_tensor(tensor))

    def load_tensor(self, path: PathLike) -> Tensor:
        return decode_tensor(self._read(path))

    def save_mask(self, path: PathLike, mask: GuidanceMask) -> Path:
        return self._write(path, encode_mask(mask))

    def load_mask(self, path: PathLike) -> GuidanceMask:
        return decode_mask(self._read(path))

    def save_weights(self, path: PathLike, layers) -> Path:
        """layers: ConvLayer 列表或 (weights, bias) 列表"""
        arrays = [(l.weights.data, l.bias) if hasattr(l, "weights") else l for l in layers]
        return self._write(path, encode_weights(arrays))

    def load_weights(self, path: PathLike) -> LayerArrays:
        return decode_weights(self._read(path))

    # ===== 图像 =====
    def save_image(self, path: PathLike, image: Tensor) -> Path:
        """保存为 PGM (P5) 或 PNG，按扩展名决定"""
        if image.n != 1 or image.c != 1:
            raise FormatError(f"only single grayscale images can be saved, got shape {image.shape}")
        pixels = np.clip(np.round(image.data[0, 0] * 255), 0, 255).astype(np.uint8)
        return self._save_gray(path, pixels)

    def _save_gray(self, path: PathLike, pixels: np.ndarray) -> Path:
        target = self.path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(target)
        self.logger.debug(f"Wrote {target}")
        return target

    def _load_gray(self, path: PathLike) -> np.ndarray:
        (target,) = self.require([path])
        try:
            with Image.open(target) as im:
                return np.asarray(im.convert("L"), dtype=np.uint8)
        except OSError as e:
            raise FormatError(f"cannot read image {target}: {e}") from e

    def load_image(self, path: PathLike) -> Tensor:
        pixels = self._load_gray(path)
        return Tensor((pixels / 255.0).astype(np.float32)[None, None])

    def export_mask_pgm(self, path: PathLike, mask: GuidanceMask) -> Path:
        return self._save_gray(path, mask.grid.astype(np.uint8) * 255)

    def import_mask_pgm(self, path: PathLike, cell_size: int = 32) -> GuidanceMask:
        return GuidanceMask(self._load_gray(path) > 127, cell_size)

    def save_heatmap(self, path: PathLike, guidance_map: GuidanceMap) -> Path:
        """概率 x 255 四舍五入"""
        pixels = np.clip(np.round(guidance_map.probabilities * 255), 0, 255).astype(np.uint8)
        return self._save_gray(path, pixels)

    # ===== 标注与检测结果 =====
    def save_boxes(self, path: PathLike, boxes: Sequence[BBox]) -> Path:
        lines = [",".join(format_number(v) for v in (b.x, b.y, b.w, b.h)) for b in boxes]
        return self._write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))

    def load_boxes(self, path: PathLike) -> List[BBox]:
        text = self._read(path).decode("ascii", errors="replace")
        return [parse_box_line(line) for line in text.splitlines() if line.strip()]

    def save_detections(self, path: PathLike, detections: Sequence[Detection]) -> Path:
        lines = [d.to_line() for d in detections]
        return self._write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))

    def load_detections(self, path: PathLike) -> List[Detection]:
        text = self._read(path).decode("ascii", errors="replace")
        return [parse_detection_line(line) for line in text.splitlines() if line.strip()]

    # ===== 报告 =====
    def write_csv(self, path: PathLike, rows: Sequence[Dict[str, object]],
                  sort_by: Optional[Sequence[str]] = None, columns: Optional[Sequence[str]] = None) -> Path:
        """带表头的 CSV；写出前按 sort_by 排序"""
        frame = pd.DataFrame(list(rows), columns=list(columns) if columns else None)
        if sort_by and len(frame):
            frame = frame.sort_values(list(sort_by), kind="mergesort").reset_index(drop=True)
        target = self.path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(target, index=False)
        self.logger.info(f"Wrote report {target} ({len(frame)} rows)")
        return target

    def read_csv(self, path: PathLike) -> pd.DataFrame:
        (target,) = self.require([path])
        return pd.read_csv(target)

    def save_json(self, path: PathLike, data: dict) -> Path:
        return self._write(path, json.dumps(data, indent=2, sort_keys=True).encode("utf-8"))

    def load_json(self, path: PathLike) -> dict:
        try:
            return json.loads(self._read(path).decode("utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"bad JSON in {path}: {e}") from e

    # ===== 数据集 =====
    def save_dataset(self, directory: PathLike, split: str, samples: Sequence[Sample]) -> Path:
        """<dir>/<split>/<NNNNN>.pgm + <NNNNN>.txt"""
        base = self.path(directory, split)
        for s in samples:
            self.save_image(base / f"{s.name}.pgm", s.image)
            self.save_boxes(base / f"{s.name}.txt", s.boxes)
        self.logger.info(f"Saved {len(samples)} {split} samples to {base}")
        return base

    def load_dataset(self, directory: PathLike, split: str) -> List[Sample]:
        base = self.path(directory, split)
        if not base.is_dir():
            raise ArtifactMissingError([str(base)])
        images = sorted(list(base.glob("*.pgm")) + list(base.glob("*.png")))
        self.require([p.with_suffix(".txt") for p in images])
        # 检测器要求边长为 32 的倍数
        return [Sample(p.stem, pad_to_multiple(self.load_image(p)), self.load_boxes(p.with_suffix(".txt")))
                for p in images]
