# tensor_core.py - 稠密张量与参考（非引导）卷积核
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core_system import DimensionError
from data_models import Precision

logger = logging.getLogger(__name__)

# GEMM 固定行块大小：每一行都由形状完全相同的矩阵乘产生
GEMM_TILE_ROWS = 256


class Tensor:
    """稠密四维张量 (n, c, h, w)，行优先连续存储"""

    __slots__ = ("data",)

    def __init__(self, data, precision: Optional[Precision] = None):
        arr = np.asarray(data)
        if precision is None:
            precision = Precision.of(arr.dtype) if arr.dtype in (np.float32, np.float64) else Precision.FP32
        arr = np.ascontiguousarray(arr, dtype=precision.dtype)
        if arr.ndim != 4:
            raise DimensionError(f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        self.data = arr

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int, int], precision: Precision = Precision.FP32) -> "Tensor":
        return cls(np.zeros(shape, dtype=precision.dtype))

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    @property
    def size(self) -> int:
        return self.data.size

    def offset(self, n: int, c: int, y: int, x: int) -> int:
        """逻辑下标在扁平存储中的位置"""
        _, C, H, W = self.shape
        return ((n * C + c) * H + y) * W + x

    def astype(self, precision: Precision) -> "Tensor":
        return Tensor(self.data, precision)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision.value})"


@dataclass
class ConvLayer:
    """卷积层参数，稠密与引导路径共用"""
    weights: Tensor
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if not isinstance(self.weights, Tensor):
            self.weights = Tensor(self.weights)
        self.bias = np.ascontiguousarray(self.bias, dtype=self.weights.data.dtype).reshape(-1)
        if self.bias.shape != (self.out_channels,):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weights shape {self.weights.shape}"
            )
        if self.stride < 1 or self.padding < 0:
            raise DimensionError(f"invalid stride {self.stride} / padding {self.padding}")

    @classmethod
    def create(cls, out_channels: int, in_channels: int, kernel: int, stride: int = 1,
               padding: int = 0, rng: Optional[np.random.Generator] = None,
               precision: Precision = Precision.FP32) -> "ConvLayer":
        """He 正态初始化"""
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        w = rng.standard_normal((out_channels, in_channels, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        return cls(Tensor(w, precision), np.zeros(out_channels), stride, padding)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]

    @property
    def precision(self) -> Precision:
        return self.weights.precision

    def output_size(self, in_h: int, in_w: int) -> Tuple[int, int]:
        ho = (in_h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (in_w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(
                f"input spatial size {(in_h, in_w)} too small for kernel "
                f"{(self.kernel_h, self.kernel_w)} with padding {self.padding}"
            )
        return ho, wo

    def filter_matrix(self) -> np.ndarray:
        """(out, in*kh*kw) 的卷积滤波矩阵"""
        return self.weights.data.reshape(self.out_channels, -1)

    def copy(self) -> "ConvLayer":
        return ConvLayer(Tensor(self.weights.data.copy()), self.bias.copy(), self.stride, self.padding)


def check_conv_input(input: Tensor, layer: ConvLayer) -> Tuple[int, int]:
    """校验输入通道并返回输出空间尺寸"""
    if input.c != layer.in_channels:
        raise DimensionError(
            f"input shape {input.shape} does not match layer weights shape {layer.weights.shape}"
        )
    return layer.output_size(input.h, input.w)


def _window_view(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """(n, Ho, Wo, c, kh, kw) 的只读窗口视图"""
    p = layer.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (layer.kernel_h, layer.kernel_w), axis=(2, 3))
    win = win[:, :, ::layer.stride, ::layer.stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def im2col(input: Tensor, layer: ConvLayer) -> np.ndarray:
    """展开为 (n, Ho*Wo, in*kh*kw) 的图像块矩阵"""
    ho, wo = check_conv_input(input, layer)
    win = _window_view(input.data, layer)
    return win.reshape(input.n, ho * wo, -1)


def gather_patches(x: np.ndarray, layer: ConvLayer, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """只收集给定输出位置的图像块行，返回 (n, len(ys), in*kh*kw)"""
    win = _window_view(x, layer)
    rows = win[:, ys, xs]
    return rows.reshape(x.shape[0], len(ys), layer.in_channels * layer.kernel_h * layer.kernel_w)


def gemm(a: np.ndarray, b: np.ndarray, threads: int = 1, tile_rows: int = GEMM_TILE_ROWS) -> np.ndarray:
    """按固定行块计算 a @ b；串行与并行结果逐位一致"""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply matrices of shape {a.shape} and {b.shape}")

    m, k = a.shape
    out = np.empty((m, b.shape[1]), dtype=np.result_type(a, b))
    if m == 0:
        return out
    bc = np.ascontiguousarray(b, dtype=out.dtype)

    def run_tile(r0: int):
        r1 = min(r0 + tile_rows, m)
        tile = np.empty((tile_rows, k), dtype=out.dtype)
        tile[: r1 - r0] = a[r0:r1]
        tile[r1 - r0:] = 0
        out[r0:r1] = (tile @ bc)[: r1 - r0]

    starts = range(0, m, tile_rows)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_tile, starts))
    else:
        for r0 in starts:
            run_tile(r0)
    return out


def dense_conv2d(input: Tensor, layer: ConvLayer, threads: int = 1) -> Tensor:
    """im2col + GEMM 的稠密卷积（互相关，零填充）"""
    ho, wo = check_conv_input(input, layer)
    cols = im2col(input, layer)
    n, m, k = cols.shape
    out = gemm(cols.reshape(n * m, k), layer.filter_matrix().T, threads)
    out += layer.bias
    return Tensor(out.reshape(n, ho, wo, layer.out_channels).transpose(0, 3, 1, 2))


def conv2d_backward_at(grad_out: np.ndarray, x: np.ndarray, layer: ConvLayer,
                       ys: np.ndarray, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """只在给定输出位置上反向传播卷积；其余位置的梯度贡献为零"""
    n, _, h, w = x.shape
    kh, kw, s, p = layer.kernel_h, layer.kernel_w, layer.stride, layer.padding
    m = len(ys)

    g_rows = np.ascontiguousarray(grad_out[:, :, ys, xs].transpose(0, 2, 1)).reshape(n * m, layer.out_channels)
    grad_bias = g_rows.sum(axis=0)

    rows = gather_patches(x, layer, ys, xs).reshape(n * m, layer.filter_matrix().shape[1])
    grad_w = (g_rows.T @ rows).reshape(layer.weights.shape)

    cols = (g_rows @ layer.filter_matrix()).reshape(n, m, layer.in_channels, kh, kw)
    grad_xp = np.zeros((n, layer.in_channels, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            # 同一 (i, j) 下各输出位置写入的输入坐标互不相同
            grad_xp[:, :, ys * s + i, xs * s + j] += cols[:, :, :, i, j].transpose(0, 2, 1)
    grad_x = grad_xp[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(grad_x), grad_w.astype(x.dtype, copy=False), grad_bias.astype(x.dtype, copy=False)


def dense_conv2d_backward(grad_out: Tensor, input: Tensor, layer: ConvLayer) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """稠密卷积反向传播"""
    ho, wo = check_conv_input(input, layer)
    expected = (input.n, layer.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise DimensionError(f"gradient shape {grad_out.shape} does not match conv output shape {expected}")
    ys, xs = np.nonzero(np.ones((ho, wo), dtype=bool))
    gx, gw, gb = conv2d_backward_at(grad_out.data, input.data, layer, ys, xs)
    return Tensor(gx), gw, gb


# ===== 池化 / 上采样 / 归一化 =====
def _pool_out(size: int, window: int, stride: int) -> int:
    if size < 1 or window < 1 or stride < 1:
        raise DimensionError(f"pooling of size {size} with window {window}, stride {stride} has no output")
    out = -(-max(size - window, 0) // stride) + 1
    while out > 1 and (out - 1) * stride >= size:
        out -= 1
    return out


def _pool_slices(window: int, stride: int, ho: int, wo: int):
    for dy in range(window):
        for dx in range(window):
            yield (slice(dy, dy + (ho - 1) * stride + 1, stride),
                   slice(dx, dx + (wo - 1) * stride + 1, stride))


def _pool_geometry(h: int, w: int, window: int, stride: int):
    ho, wo = _pool_out(h, window, stride), _pool_out(w, window, stride)
    ph = max((ho - 1) * stride + window, h)
    pw = max((wo - 1) * stride + window, w)
    valid = np.zeros((ph, pw))
    valid[:h, :w] = 1.0
    counts = np.zeros((ho, wo))
    for sy, sx in _pool_slices(window, stride, ho, wo):
        counts += valid[sy, sx]
    return ho, wo, ph, pw, counts


def avg_pool2d(input: Tensor, window: int, stride: int) -> Tensor:
    """平均池化（ceil 输出尺寸，边界窗口只统计图内元素）"""
    n, c, h, w = input.shape
    ho, wo, ph, pw, counts = _pool_geometry(h, w, window, stride)
    xp = np.zeros((n, c, ph, pw), dtype=input.data.dtype)
    xp[:, :, :h, :w] = input.data
    sums = np.zeros((n, c, ho, wo), dtype=input.data.dtype)
    for sy, sx in _pool_slices(window, stride, ho, wo):
        sums += xp[:, :, sy, sx]
    return Tensor(sums / counts.astype(sums.dtype))


def avg_pool2d_backward(grad_out: Tensor, input_shape: Sequence[int], window: int, stride: int) -> Tensor:
    n, c, h, w = input_shape
    ho, wo, ph, pw, counts = _pool_geometry(h, w, window, stride)
    if grad_out.shape != (n, c, ho, wo):
        raise DimensionError(f"gradient shape {grad_out.shape} does not match pool output {(n, c, ho, wo)}")
    share = grad_out.data / counts.astype(grad_out.data.dtype)
    gp = np.zeros((n, c, ph, pw), dtype=grad_out.data.dtype)
    for sy, sx in _pool_slices(window, stride, ho, wo):
        gp[:, :, sy, sx] += share
    return Tensor(gp[:, :, :h, :w])


def nearest_upsample(input: Tensor, factor: int) -> Tensor:
    """最近邻上采样，每个值复制 factor x factor"""
    if factor < 1:
        raise DimensionError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return Tensor(input.data.copy())
    return Tensor(np.repeat(np.repeat(input.data, factor, axis=2), factor, axis=3))


def nearest_upsample_backward(grad_out: Tensor, input_shape: Sequence[int], factor: int) -> Tensor:
    """上采样（可能已裁剪）的反向：按块求和"""
    n, c, h, w = input_shape
    full = np.zeros((n, c, h * factor, w * factor), dtype=grad_out.data.dtype)
    gh, gw = grad_out.h, grad_out.w
    full[:, :, :gh, :gw] = grad_out.data
    return Tensor(full.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))


def crop(input: Tensor, h: int, w: int) -> Tensor:
    if h > input.h or w > input.w:
        raise DimensionError(f"cannot crop {input.shape} to {(h, w)}")
    return Tensor(input.data[:, :, :h, :w])


def pad_to_multiple(input: Tensor, multiple: int = 32) -> Tensor:
    """右侧和下方按边缘值补齐到 multiple 的整数倍；已对齐时原样返回"""
    if multiple < 1:
        raise DimensionError(f"pad multiple must be positive, got {multiple}")
    pad_h = -input.h % multiple
    pad_w = -input.w % multiple
    if not pad_h and not pad_w:
        return input
    return Tensor(np.pad(input.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge"))


def l2_normalize_channels(input: Tensor, epsilon: float = 1e-12) -> Tensor:
    """每个位置的通道向量除以 sqrt(平方和 + epsilon)"""
    if epsilon <= 0:
        raise DimensionError(f"epsilon must be positive, got {epsilon}")
    x = input.data
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + epsilon)
    return Tensor(x / norm)


def l2_normalize_backward(grad_out: Tensor, input: Tensor, epsilon: float = 1e-12) -> Tensor:
    x, g = input.data, grad_out.data
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + epsilon)
    y = x / norm
    return Tensor((g - y * (g * y).sum(axis=1, keepdims=True)) / norm)


# ===== 逐元素运算 =====
def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """数值稳定的 sigmoid，|x| 很大时平稳饱和"""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def relu(input: Tensor) -> Tensor:
    return Tensor(np.maximum(input.data, 0))


def relu_backward(grad_out: Tensor, pre: Tensor) -> Tensor:
    return Tensor(np.where(pre.data > 0, grad_out.data, 0).astype(grad_out.data.dtype, copy=False))


def sigmoid(input: Tensor) -> Tensor:
    return Tensor(sigmoid_array(input.data))


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot add tensors of shape {a.shape} and {b.shape}")
    return Tensor(a.data + b.data)


# ===== 优化器 =====
class MomentumSGD:
    """带动量的 SGD，多步学习率衰减（衰减点为总步数的比例）"""

    def __init__(self, layers: Sequence[ConvLayer], learning_rate: float, momentum: float,
                 total_steps: int, decay_points: Sequence[float] = (), decay_factor: float = 0.1):
        self.layers = list(layers)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.milestones = sorted(int(round(f * total_steps)) for f in decay_points)
        self.velocity = [(np.zeros_like(l.weights.data), np.zeros_like(l.bias)) for l in self.layers]
        self.steps = 0

    def learning_rate_at(self, step: int) -> float:
        drops = sum(1 for m in self.milestones if step >= m)
        return self.learning_rate * self.decay_factor ** drops

    def step(self, grads: Sequence[Tuple[np.ndarray, np.ndarray]]):
        """原地更新各层参数"""
        if len(grads) != len(self.layers):
            raise DimensionError(f"got {len(grads)} gradients for {len(self.layers)} layers")
        lr = self.learning_rate_at(self.steps)
        for layer, (vw, vb), (gw, gb) in zip(self.layers, self.velocity, grads):
            vw *= self.momentum
            vw -= lr * gw
            vb *= self.momentum
            vb -= lr * gb
            layer.weights.data += vw
            layer.bias += vb
        self.steps += 1
