# scene_generator.py - 稀疏文本合成场景生成
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core_system import DataConfig, DatasetError
from data_models import TEXT_RATIO_BUCKETS, BBox, Sample, SceneSpec
from tensor_core import Tensor

logger = logging.getLogger(__name__)

MIN_SIDE = 8          # 文本框最小边长
MAX_LINE_HEIGHT = 48  # 文本行高上限（面积不足时可超出）
RATIO_TOLERANCE = 0.05

# 条纹灰度值取整到 1/255，PGM 存取无损
STROKE_DARK = 13 / 255
STROKE_LIGHT = 242 / 255

SPLIT_IDS = {'train': 0, 'val': 1, 'test': 2}


def text_area_ratio(boxes: Sequence[BBox], height: int, width: int) -> float:
    """文本框并集面积占整图比例"""
    covered = np.zeros((height, width), dtype=bool)
    for b in boxes:
        covered[max(int(b.y), 0):min(int(math.ceil(b.y2)), height),
                max(int(b.x), 0):min(int(math.ceil(b.x2)), width)] = True
    return float(covered.mean())


def _place_lines(rng: np.random.Generator, count: int, target: float, spec: SceneSpec,
                 usable_h: int, usable_w: int) -> Optional[List[BBox]]:
    """每个文本行占一个水平条带，互不重叠"""
    band = usable_h // count
    if band < MIN_SIDE:
        return None
    area = target * spec.height * spec.width / count
    boxes = []
    for i in range(count):
        h = int(rng.integers(MIN_SIDE, min(band, MAX_LINE_HEIGHT) + 1))
        h = max(h, math.ceil(area / usable_w))
        if h > band:
            return None
        w = int(min(usable_w, max(MIN_SIDE, round(area / h))))
        x = spec.margin + int(rng.integers(0, usable_w - w + 1))
        y = spec.margin + i * band + int(rng.integers(0, band - h + 1))
        boxes.append(BBox(float(x), float(y), float(w), float(h)))
    return boxes


def layout_boxes(spec: SceneSpec) -> List[BBox]:
    """按目标文本面积比例摆放文本行；不可达时报错"""
    if not 0 <= spec.bucket < len(TEXT_RATIO_BUCKETS):
        raise DatasetError(f"unknown text ratio bucket: {spec.bucket}")
    if spec.min_boxes < 1 or spec.max_boxes < spec.min_boxes:
        raise DatasetError(f"invalid box count range {spec.min_boxes}..{spec.max_boxes}")
    usable_h = spec.height - 2 * spec.margin
    usable_w = spec.width - 2 * spec.margin
    if usable_h < MIN_SIDE or usable_w < MIN_SIDE:
        raise DatasetError(f"infeasible scene spec: no room inside margin {spec.margin} of {spec.height}x{spec.width}")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, 0])))
    lo, hi = spec.ratio_range
    target = float(rng.uniform(max(lo, 0.01), hi))
    first = int(rng.integers(spec.min_boxes, spec.max_boxes + 1))
    counts = [first] + [k for k in range(spec.min_boxes, spec.max_boxes + 1) if k != first]

    for count in counts:
        boxes = _place_lines(rng, count, target, spec, usable_h, usable_w)
        if boxes and abs(text_area_ratio(boxes, spec.height, spec.width) - target) <= RATIO_TOLERANCE:
            return boxes
    raise DatasetError(
        f"infeasible scene spec: text ratio {target:.3f} unreachable with "
        f"{spec.min_boxes}..{spec.max_boxes} boxes in {spec.height}x{spec.width}"
    )


def render_scene(height: int, width: int, boxes: Sequence[BBox], stripe_period: int = 4,
                 noise_level: float = 0.08, seed: int = 0) -> Tensor:
    """噪声背景 + 竖条纹文本块，返回 1x1xHxW 的 [0,1] 灰度图"""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    img = np.clip(0.5 + noise_level * rng.standard_normal((height, width)), 0.0, 1.0)
    img = np.round(img * 255) / 255
    half = max(stripe_period // 2, 1)
    for b in boxes:
        x0, y0 = max(int(b.x), 0), max(int(b.y), 0)
        x1, y1 = min(int(b.x2), width), min(int(b.y2), height)
        cols = np.arange(x1 - x0)
        img[y0:y1, x0:x1] = np.where((cols // half) % 2 == 0, STROKE_DARK, STROKE_LIGHT)[None, :]
    return Tensor(img[None, None].astype(np.float32))


def gen_scene(spec: SceneSpec) -> Tuple[Tensor, List[BBox]]:
    boxes = layout_boxes(spec)
    image = render_scene(spec.height, spec.width, boxes, spec.stripe_period, spec.noise_level, spec.seed)
    return image, boxes


def build_dataset(count: int, config: DataConfig, seed: int = 0, split: str = "train",
                  threads: int = 1) -> List[Sample]:
    """按分桶权重抽样生成 count 张场景；每张图的种子由 SeedSequence 派生"""
    if count < 1:
        raise DatasetError(f"dataset must contain at least one image, got {count}")
    if split not in SPLIT_IDS:
        raise DatasetError(f"unknown split: {split}")
    weights = np.asarray(config.bucket_weights, dtype=np.float64)
    if weights.shape != (len(TEXT_RATIO_BUCKETS),) or (weights < 0).any() or weights.sum() <= 0:
        raise DatasetError(f"bucket weights must be {len(TEXT_RATIO_BUCKETS)} non-negative values")
    probs = weights / weights.sum()
    children = np.random.SeedSequence([seed, SPLIT_IDS[split]]).spawn(count)

    def make(i: int) -> Sample:
        child = children[i]
        bucket = int(np.random.Generator(np.random.Philox(child)).choice(len(probs), p=probs))
        spec = SceneSpec(
            height=config.image_size, width=config.image_size, bucket=bucket,
            min_boxes=config.min_boxes, max_boxes=config.max_boxes,
            stripe_period=config.stripe_period, noise_level=config.noise_level,
            margin=config.margin, seed=int(child.generate_state(1, np.uint64)[0])
        )
        image, boxes = gen_scene(spec)
        return Sample(f"{i:05d}", image, boxes)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(make, range(count)))
    else:
        samples = [make(i) for i in range(count)]

    ratios = [text_area_ratio(s.boxes, config.image_size, config.image_size) for s in samples]
    logger.info(f"Generated {count} {split} scenes, mean text ratio {np.mean(ratios):.3f}")
    return samples
