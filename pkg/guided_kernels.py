# guided_kernels.py - 引导卷积：只在掩码区域内计算卷积与非线性
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core_system import ConfigurationError, DimensionError, ModeError
from data_models import GuidanceMask, MaskView, PointwiseOp
from tensor_core import (
    ConvLayer, Tensor, check_conv_input, conv2d_backward_at, gather_patches, gemm, sigmoid_array
)

logger = logging.getLogger(__name__)


# ===== 掩码分辨率适配 =====
def mask_project(mask: GuidanceMask, feature_h: int, feature_w: int,
                 image_h: int, image_w: int) -> MaskView:
    """把 1/cell_size 掩码投影到任意特征图分辨率（像素中心最近邻）"""
    if feature_h < 1 or feature_w < 1:
        raise DimensionError(f"feature map must be at least 1x1, got {(feature_h, feature_w)}")
    hm, wm = mask.shape
    cy = (np.arange(feature_h) + 0.5) * (image_h / feature_h)
    cx = (np.arange(feature_w) + 0.5) * (image_w / feature_w)
    rows = np.clip(np.floor(cy / mask.cell_size).astype(np.int64), 0, hm - 1)
    cols = np.clip(np.floor(cx / mask.cell_size).astype(np.int64), 0, wm - 1)
    grid = mask.grid[np.ix_(rows, cols)]
    return MaskView(grid, stride=image_h / feature_h)


def mask_dilate(view: MaskView, radius: int) -> MaskView:
    """按切比雪夫距离扩张掩码"""
    if radius < 0:
        raise ConfigurationError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0:
        return MaskView(view.grid.copy(), view.stride)
    padded = np.pad(view.grid, radius, constant_values=False)
    size = 2 * radius + 1
    grown = sliding_window_view(padded, (size, size)).any(axis=(-2, -1))
    return MaskView(grown, view.stride)


def _check_view(view: MaskView, h: int, w: int, what: str):
    if view.shape != (h, w):
        raise DimensionError(f"mask view shape {view.shape} does not match {what} spatial shape {(h, w)}")


# ===== 前向 =====
def guided_im2col(input: Tensor, layer: ConvLayer, view: MaskView) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """只展开掩码为 true 的输出位置；行按 (y, x) 行优先排列"""
    ho, wo = check_conv_input(input, layer)
    _check_view(view, ho, wo, "conv output")
    ys, xs = view.locations()
    return gather_patches(input.data, layer, ys, xs), (ys, xs)


def guided_conv2d(input: Tensor, layer: ConvLayer, view: MaskView, threads: int = 1) -> Tensor:
    """缩小矩阵上的 GEMM，结果回填到零初始化的完整输出"""
    rows, (ys, xs) = guided_im2col(input, layer, view)
    ho, wo = view.shape
    n, m, k = rows.shape
    out = np.zeros((n, layer.out_channels, ho, wo), dtype=layer.weights.data.dtype)
    if m == 0:
        return Tensor(out)

    vals = gemm(rows.reshape(n * m, k), layer.filter_matrix().T, threads)
    vals += layer.bias
    # 背景保持 0.0，不加偏置
    out[:, :, ys, xs] = vals.reshape(n, m, layer.out_channels).transpose(0, 2, 1)
    return Tensor(out)


def _apply(op: PointwiseOp, values: np.ndarray) -> np.ndarray:
    if op is PointwiseOp.RELU:
        return np.maximum(values, 0)
    if op is PointwiseOp.SIGMOID:
        return sigmoid_array(values)
    raise ModeError(f"unsupported pointwise op: {op}")


def guided_pointwise(op: PointwiseOp, input: Tensor, view: MaskView, scale: float = 0.0) -> Tensor:
    """掩码内逐元素运算；背景置零，SCALE 模式下背景乘以 scale"""
    op = PointwiseOp(op)
    _check_view(view, input.h, input.w, "input")
    x = input.data
    if op is PointwiseOp.SCALE:
        return Tensor(np.where(view.grid, x, x * x.dtype.type(scale)))

    ys, xs = view.locations()
    out = np.zeros_like(x)
    if len(ys):
        out[:, :, ys, xs] = _apply(op, x[:, :, ys, xs])
    return Tensor(out)


# ===== 反向 =====
def guided_conv2d_backward(grad_out: Tensor, input: Tensor, layer: ConvLayer,
                           view: MaskView) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """背景输出位置不产生任何梯度贡献"""
    ho, wo = check_conv_input(input, layer)
    _check_view(view, ho, wo, "conv output")
    expected = (input.n, layer.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise DimensionError(f"gradient shape {grad_out.shape} does not match conv output shape {expected}")
    ys, xs = view.locations()
    gx, gw, gb = conv2d_backward_at(grad_out.data, input.data, layer, ys, xs)
    return Tensor(gx), gw, gb


def guided_pointwise_backward(op: PointwiseOp, grad_out: Tensor, input: Tensor,
                              view: MaskView, scale: float = 0.0) -> Tensor:
    op = PointwiseOp(op)
    _check_view(view, input.h, input.w, "input")
    g, x = grad_out.data, input.data
    if op is PointwiseOp.SCALE:
        return Tensor(np.where(view.grid, g, g * g.dtype.type(scale)))
    if op is PointwiseOp.RELU:
        return Tensor(np.where(view.grid & (x > 0), g, 0).astype(g.dtype, copy=False))
    s = sigmoid_array(x)
    return Tensor(np.where(view.grid, g * s * (1 - s), 0).astype(g.dtype, copy=False))


# ===== 计算量 =====
def flop_count(layer: ConvLayer, output_shape: Sequence[int], view: Optional[MaskView] = None) -> int:
    """乘加次数 = 计算位置数 * out * in * kh * kw * batch"""
    if len(output_shape) == 4:
        batch, _, ho, wo = output_shape
    else:
        batch, (ho, wo) = 1, tuple(output_shape)
    if view is None:
        locations = ho * wo
    else:
        _check_view(view, ho, wo, "conv output")
        locations = view.true_cells
    per_location = layer.out_channels * layer.in_channels * layer.kernel_h * layer.kernel_w
    return int(batch) * int(locations) * per_location
