# conftest.py - 测试共享夹具与朴素参考实现
import numpy as np
import pytest

from artifact_store import ArtifactStore
from core_system import AppConfig
from data_models import Precision
from tensor_core import ConvLayer, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path)


@pytest.fixture
def make_layer(rng):
    """随机卷积层工厂（偏置非零）"""
    def factory(cout, cin, k, stride=1, padding=0, precision=Precision.FP32):
        w = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        return ConvLayer(Tensor(w, precision), b, stride, padding)
    return factory


@pytest.fixture
def tiny_config():
    """几秒内跑完的小规模配置"""
    return AppConfig.model_validate({
        'seed': 0,
        'data': {'train_images': 3, 'val_images': 2, 'image_size': 96, 'max_boxes': 2,
                 'bucket_weights': [1, 0, 0, 0, 0]},
        'guidance': {'epochs': 1},
        'detector': {'epochs': 1},
        'bench': {'repeats': 1, 'warmup': 0, 'channels': 4, 'feature_size': 32,
                  'pipeline_image_size': 64},
        'sweep': {'p_values': [0.0, 1.0], 'seeds': [0]},
    })


def naive_conv2d(x, w, b, stride, padding):
    """6 重循环的互相关参考实现"""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = float(b[o])
                    for ci in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[i, ci, y * stride + dy, xx * stride + dx] * w[o, ci, dy, dx]
                    out[i, o, y, xx] = acc
    return out


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


def check_gradients(loss_fn, params, analytic, rng, samples=12, h=1e-6):
    """对随机抽取的参数元素做中心差分，返回范数相对误差"""
    numeric, picked = [], []
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for idx in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = loss_fn()
            flat[idx] = old - h
            down = loss_fn()
            flat[idx] = old
            numeric.append((up - down) / (2 * h))
            picked.append(gflat[idx])
    return relative_error(picked, numeric)
