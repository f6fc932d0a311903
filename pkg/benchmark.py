# benchmark.py - 稠密 vs 引导卷积计时、乘加统计与端到端耗时拆分
import logging
import time
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence

import cpuinfo
import numpy as np
import psutil

from core_system import AppConfig
from data_models import BenchRecord, GuidanceMask, Phase, PipelineMode, Precision, SceneSpec
from detector import ToyDetector
from guidance_net import GuidanceNet, gt_mask_from_boxes
from guided_kernels import flop_count, guided_conv2d, mask_project
from scene_generator import gen_scene
from synthesis import pipeline_mode_select
from tensor_core import ConvLayer, Tensor, dense_conv2d

logger = logging.getLogger(__name__)


def describe_environment() -> Dict[str, object]:
    """记录 CPU 型号与核数"""
    info = cpuinfo.get_cpu_info()
    return {
        'cpu': info.get('brand_raw', 'unknown'),
        'physical_cores': psutil.cpu_count(logical=False),
        'logical_cores': psutil.cpu_count(logical=True),
        'numpy': np.__version__
    }


@contextmanager
def pinned_cpus(threads: int):
    """把进程绑定到前 threads 个 CPU（平台不支持时跳过）"""
    proc = psutil.Process()
    try:
        original = proc.cpu_affinity()
    except (AttributeError, psutil.Error):
        yield
        return
    try:
        proc.cpu_affinity(original[:max(1, threads)])
        yield
    finally:
        proc.cpu_affinity(original)


def median_time_ns(fn: Callable[[], object], repeats: int, warmup: int) -> int:
    """预热后取 repeats 次运行的中位数"""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return int(np.median(samples))


def ratio_view(size: int, ratio: float, rng: np.random.Generator, cell_size: int = 32):
    """在 cell_size 块网格上随机选 round(ratio * 块数) 个块，再投影到特征图"""
    hm, wm = GuidanceMask.grid_shape(size, size, cell_size)
    cells = hm * wm
    flat = np.zeros(cells, dtype=bool)
    flat[rng.permutation(cells)[:int(round(ratio * cells))]] = True
    mask = GuidanceMask(flat.reshape(hm, wm), cell_size)
    return mask_project(mask, size, size, size, size)


def run_bench(config: AppConfig, ratios: Optional[Sequence[float]] = None,
              thread_counts: Optional[Sequence[int]] = None) -> List[BenchRecord]:
    """单层 kxk 卷积在各掩码比例与线程数下的耗时"""
    bench = config.bench
    ratios = list(ratios if ratios is not None else bench.ratios)
    thread_counts = list(thread_counts if thread_counts is not None else bench.threads)
    env = describe_environment()
    logger.info(f"Benchmark environment: {env}")

    rng = np.random.Generator(np.random.Philox(config.seed))
    size, ch, k = bench.feature_size, bench.channels, bench.kernel
    layer = ConvLayer.create(ch, ch, k, stride=1, padding=k // 2, rng=rng, precision=Precision.FP32)
    x = Tensor(rng.standard_normal((1, ch, size, size)), Precision.FP32)
    ho, wo = layer.output_size(size, size)
    out_shape = (1, ch, ho, wo)
    layer_id = f"conv{k}x{k}_{ch}to{ch}_{size}"

    records = []
    for threads in thread_counts:
        with pinned_cpus(threads):
            dense_ns = median_time_ns(lambda: dense_conv2d(x, layer, threads), bench.repeats, bench.warmup)
            records.append(BenchRecord(layer_id, PipelineMode.DENSE.value, 1.0, dense_ns,
                                       flop_count(layer, out_shape), threads))
            for ratio in ratios:
                view = ratio_view(size, ratio, rng)
                guided_ns = median_time_ns(lambda: guided_conv2d(x, layer, view, threads),
                                           bench.repeats, bench.warmup)
                records.append(BenchRecord(layer_id, PipelineMode.GUIDED.value, float(ratio), guided_ns,
                                           flop_count(layer, out_shape, view), threads))
                logger.info(
                    f"ratio {ratio:g} threads {threads}: dense {dense_ns / 1e6:.2f} ms, "
                    f"guided {guided_ns / 1e6:.2f} ms, speedup {dense_ns / max(guided_ns, 1):.2f}x"
                )
    return records


def run_pipeline_split(config: AppConfig, guidance: Optional[GuidanceNet] = None,
                       detector: Optional[ToyDetector] = None) -> List[Dict[str, object]]:
    """端到端耗时拆分：引导网络 vs 主检测器；Guided+ 以减速比报告"""
    bench = config.bench
    size = bench.pipeline_image_size
    spec = SceneSpec(height=size, width=size, bucket=0, min_boxes=config.data.min_boxes,
                     max_boxes=config.data.max_boxes, stripe_period=config.data.stripe_period,
                     noise_level=config.data.noise_level, margin=config.data.margin, seed=config.seed)
    image, boxes = gen_scene(spec)
    detector = detector or ToyDetector.create(config.seed)
    if guidance is None:
        # 未训练的引导网络只用于计时，掩码取真值
        guidance = GuidanceNet.create(config.seed, tau=config.guidance.tau)
        mask = gt_mask_from_boxes(size, size, boxes)
    else:
        mask = guidance.predict_mask(image)

    dense = pipeline_mode_select(PipelineMode.DENSE, Phase.TEST)
    guided = pipeline_mode_select(PipelineMode.GUIDED, Phase.TEST)
    plus = pipeline_mode_select(PipelineMode.GUIDED_PLUS, Phase.TEST, plus_p=config.detector.plus_p)
    threads = config.threads

    def timed(fn):
        return median_time_ns(fn, bench.repeats, bench.warmup)

    with pinned_cpus(threads):
        t_guidance = timed(lambda: guidance.predict_mask(image))
        t_dense = timed(lambda: detector.forward(image, dense, None, threads))
        t_guided = timed(lambda: detector.forward(image, guided, mask, threads))
        t_plus = timed(lambda: detector.forward(image, plus, mask, threads))

    rows = []
    for mode, t_primary in ((PipelineMode.GUIDED, t_guided), (PipelineMode.GUIDED_PLUS, t_plus)):
        total = t_guidance + t_primary
        rows.append({
            'mode': mode.value,
            'mask_ratio': mask.area_ratio,
            'guidance_ns_nondet': t_guidance,
            'primary_ns_nondet': t_primary,
            'guidance_share_nondet': t_guidance / total,
            'primary_share_nondet': t_primary / total,
            'dense_ns_nondet': t_dense,
            'speedup_vs_dense_nondet': t_dense / total,
            'slowdown_vs_dense_nondet': total / t_dense
        })
        logger.info(
            f"{mode.value}: guidance {100 * t_guidance / total:.1f}% / primary {100 * t_primary / total:.1f}%, "
            f"speedup vs dense {t_dense / total:.2f}x"
        )
    return rows
