import os
import struct

# 测试期间日志不落盘
os.environ.setdefault("TISSUENET_LOG_FILE", os.devnull)

import numpy as np
import pytest

from arch_spec import LayerKind, LayerSpec, StackedLayerSpec, UnitKind, UnitSpec
from model_builder import build_layer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def stacked_spec(units, name="stacked", activation="relu", hidden_activation="relu", bias=True):
    stacked = StackedLayerSpec(list(units))
    kind = LayerKind.STACKED_DENSE if stacked.kind == UnitKind.DENSE else LayerKind.STACKED_CONV
    return LayerSpec(kind=kind, name=name, stacked=stacked, activation=activation,
                     hidden_activation=hidden_activation, bias=bias)


def build_stacked(units, input_shape, seed=0, **kwargs):
    spec = stacked_spec(units, **kwargs)
    return build_layer(spec, tuple(input_shape), spec.name, np.random.default_rng(seed), np.float64)


def conv_unit(c_in=2, c_h=4, c_out=2, kernel=3, stride=1):
    return UnitSpec(c_in, c_h, c_out, kernel, stride)


def dense_unit(c_in=2, c_h=4, c_out=2):
    return UnitSpec(c_in, c_h, c_out, kind=UnitKind.DENSE)


def idx_images_bytes(images: np.ndarray) -> bytes:
    n, rows, cols = images.shape
    return struct.pack(">IIII", 0x803, n, rows, cols) + images.astype(np.uint8).tobytes()


def idx_labels_bytes(labels: np.ndarray) -> bytes:
    return struct.pack(">II", 0x801, len(labels)) + labels.astype(np.uint8).tobytes()


def cifar_record_bytes(labels, pixels: np.ndarray, coarse=None) -> bytes:
    """pixels: [n, 3, 32, 32] uint8"""
    out = b""
    for i, label in enumerate(labels):
        prefix = bytes([label]) if coarse is None else bytes([coarse[i], label])
        out += prefix + pixels[i].astype(np.uint8).tobytes()
    return out


@pytest.fixture
def mnist_dir(tmp_path):
    """20 张训练图像、10 张测试图像的小型 IDX 目录"""
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 20), ("t10k", 10)):
        images = rng.integers(0, 256, size=(n, 28, 28))
        labels = np.arange(n) % 10
        (tmp_path / f"{prefix}-images-idx3-ubyte").write_bytes(idx_images_bytes(images))
        (tmp_path / f"{prefix}-labels-idx1-ubyte").write_bytes(idx_labels_bytes(labels))
    return tmp_path
