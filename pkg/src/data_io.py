"""
data_io.py
数据集加载：MNIST (IDX)、CIFAR-10 / CIFAR-100 (二进制批文件)，归一化、数据增强、子集与合成数据
所有加载器逐字节校验格式，任何字节数异常都直接报错，不做静默截断或补齐
"""

import gzip
import os
import struct
from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DataFormatError, DomainError
from logger_config import logger
from settings import Settings
from state import PipelineState, error_update

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32

MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}
CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST = ("test_batch.bin",)
DATASETS = ("mnist", "cifar10", "cifar100", "synth")


@dataclass(frozen=True)
class Dataset:
    """加载后不可变；images 为 [N, C, H, W]（MLP 合成数据可以是 [N, D]）"""
    images: np.ndarray
    labels: np.ndarray
    split: str
    class_count: int
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"样本数 {len(self.images)} 与标签数 {len(self.labels)} 不一致")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"标签超出范围 [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])


# ========== 底层文件读取 ==========
def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _find_file(directory: str, candidates: Sequence[str]) -> str:
    for name in candidates:
        for path in (os.path.join(directory, name), os.path.join(directory, name + ".gz")):
            if os.path.exists(path):
                return path
    raise ConfigError(f"在 {directory} 中找不到数据文件 {candidates[0]}")


def parse_idx_images(raw: bytes, path: str = "<bytes>") -> np.ndarray:
    """IDX 图像文件：大端 magic 0x803、数量、行、列，随后是无符号字节像素"""
    if len(raw) < 16:
        raise DataFormatError(f"{path}: 文件被截断（头部不足 16 字节）")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"{path}: 错误的 magic 0x{magic:08x}，期望 0x{IDX_IMAGE_MAGIC:08x}")
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise DataFormatError(f"{path}: 文件被截断，期望 {expected} 字节，实际 {len(raw)}")
    if len(raw) > expected:
        raise DataFormatError(f"{path}: 文件末尾有 {len(raw) - expected} 个多余字节")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def parse_idx_labels(raw: bytes, path: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{path}: 文件被截断（头部不足 8 字节）")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"{path}: 错误的 magic 0x{magic:08x}，期望 0x{IDX_LABEL_MAGIC:08x}")
    expected = 8 + count
    if len(raw) != expected:
        kind = "被截断" if len(raw) < expected else "末尾有多余字节"
        raise DataFormatError(f"{path}: 文件{kind}，期望 {expected} 字节，实际 {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def parse_cifar_records(raw: bytes, path: str = "<bytes>", label_bytes: int = 1, label_index: int = 0,
                        class_count: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    """
    CIFAR 二进制记录：label_bytes 个标签字节 + 3072 个像素字节（R、G、B 三个平面，各 32×32 行优先）
    :return: (uint8 图像 [n, 3, 32, 32], 标签 [n])
    """
    record = label_bytes + CIFAR_PIXELS
    if len(raw) == 0 or len(raw) % record:
        raise DataFormatError(f"{path}: 文件大小 {len(raw)} 不是记录长度 {record} 的整数倍")
    table = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = table[:, label_index]
    if labels.max() >= class_count:
        raise DataFormatError(f"{path}: 标签字节 {int(labels.max())} 超出 0..{class_count - 1}")
    return table[:, label_bytes:].reshape(-1, 3, 32, 32), labels


def _to_dataset(images_u8: np.ndarray, labels: np.ndarray, split: str, class_count: int, name: str) -> Dataset:
    images = images_u8.astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels.astype(np.int64), split, class_count, name)


# ========== 数据集加载器 ==========
def load_mnist(directory: str) -> Tuple[Dataset, Dataset]:
    """像素缩放到 [0, 1]，不做其他归一化；形状 [N, 1, 28, 28]"""
    splits = []
    for split, prefix in (("train", "train"), ("test", "test")):
        images_path = _find_file(directory, MNIST_FILES[f"{prefix}_images"])
        labels_path = _find_file(directory, MNIST_FILES[f"{prefix}_labels"])
        images = parse_idx_images(_read_bytes(images_path), images_path)
        labels = parse_idx_labels(_read_bytes(labels_path), labels_path)
        if len(images) != len(labels):
            raise DataFormatError(f"{images_path} 有 {len(images)} 张图像，但 {labels_path} 有 {len(labels)} 个标签")
        if len(labels) and labels.max() > 9:
            raise DataFormatError(f"{labels_path}: 标签 {int(labels.max())} 超出 0..9")
        splits.append(_to_dataset(images[:, None, :, :], labels, split, 10, "mnist"))
    logger.info(f"📥 MNIST 加载完成：训练 {len(splits[0])}，测试 {len(splits[1])}")
    return splits[0], splits[1]


def _cifar_dir(directory: str, subdir: str) -> str:
    nested = os.path.join(directory, subdir)
    return nested if os.path.isdir(nested) else directory


def _load_cifar_split(directory: str, names: Sequence[str], split: str, name: str, label_bytes: int,
                      label_index: int, class_count: int) -> Dataset:
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for file_name in names:
        path = _find_file(directory, (file_name,))
        x, y = parse_cifar_records(_read_bytes(path), path, label_bytes, label_index, class_count)
        images.append(x)
        labels.append(y)
    return _to_dataset(np.concatenate(images), np.concatenate(labels), split, class_count, name)


def load_cifar10(directory: str) -> Tuple[Dataset, Dataset]:
    directory = _cifar_dir(directory, "cifar-10-batches-bin")
    train = _load_cifar_split(directory, CIFAR10_TRAIN, "train", "cifar10", 1, 0, 10)
    test = _load_cifar_split(directory, CIFAR10_TEST, "test", "cifar10", 1, 0, 10)
    logger.info(f"📥 CIFAR-10 加载完成：训练 {len(train)}，测试 {len(test)}")
    return train, test


def load_cifar100(directory: str) -> Tuple[Dataset, Dataset]:
    """3074 字节记录：粗标签、细标签、像素；使用细标签（100 类）"""
    directory = _cifar_dir(directory, "cifar-100-binary")
    train = _load_cifar_split(directory, ("train.bin",), "train", "cifar100", 2, 1, 100)
    test = _load_cifar_split(directory, ("test.bin",), "test", "cifar100", 2, 1, 100)
    logger.info(f"📥 CIFAR-100 加载完成：训练 {len(train)}，测试 {len(test)}")
    return train, test


# ========== 预处理 ==========
def _channel_stats(ds: Dataset, values: Sequence[float], what: str) -> np.ndarray:
    stats = np.asarray(values, dtype=np.float64)
    channels = ds.images.shape[1]
    if stats.shape != (channels,):
        raise ConfigError(f"{what} 长度 {len(stats)} 与通道数 {channels} 不一致")
    return stats.reshape((1, channels) + (1,) * (ds.images.ndim - 2))


def normalize(ds: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    """x <- (x - mean) / std（逐通道）"""
    m = _channel_stats(ds, mean, "mean")
    s = _channel_stats(ds, std, "std")
    if np.any(s <= 0):
        raise DomainError(f"std 必须为正: {list(np.ravel(s))}")
    images = ((ds.images - m) / s).astype(ds.images.dtype)
    return replace(ds, images=images)


def denormalize(ds: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    m = _channel_stats(ds, mean, "mean")
    s = _channel_stats(ds, std, "std")
    return replace(ds, images=(ds.images * s + m).astype(ds.images.dtype))


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = Settings.CROP_PADDING) -> np.ndarray:
    """四周零填充 pad 像素后随机裁剪回原尺寸，并以 0.5 概率水平翻转"""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment_crop_flip(ds: Dataset, pad: int = Settings.CROP_PADDING, seed: int = 0,
                      batch_size: int = Settings.BATCH_SIZE) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """按样本顺序产出增强后的 (images, labels) 批；同一 seed 重放得到相同的流"""
    if ds.images.ndim != 4:
        raise ConfigError("数据增强只支持 [N, C, H, W] 图像")
    rng = np.random.default_rng(seed)
    for start in range(0, len(ds), batch_size):
        stop = start + batch_size
        yield augment_batch(ds.images[start:stop], rng, pad), ds.labels[start:stop]


def subset(ds: Dataset, n: Optional[int], seed: int = 0) -> Dataset:
    """随机取 n 个样本（保持原顺序）；n 为空或不小于数据集大小时原样返回"""
    if n is None or n >= len(ds):
        return ds
    if n < 1:
        raise ConfigError(f"subset 大小必须 >= 1: {n}")
    index = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
    return replace(ds, images=ds.images[index], labels=ds.labels[index])


def synth_dataset(seed: int, n: int, classes: int, shape: Sequence[int] = (2,), separable: bool = True,
                  split: str = "train") -> Dataset:
    """
    确定性的合成数据；标签为 0..classes-1 轮转后打乱，各类样本数相差不超过 1
    separable 模式：类 k 的均值为 5·e_k，噪声 σ=1 并截断在 ±2σ，
    因而真实类坐标 >= 3、其他坐标 <= 2，按坐标取 argmax 即可全部分对
    """
    shape = tuple(int(s) for s in shape)
    dim = int(np.prod(shape))
    if n < classes:
        raise ConfigError(f"样本数 n={n} 不能少于类别数 {classes}")
    if separable and dim < classes:
        raise ConfigError(f"可分模式要求特征维度 {dim} >= 类别数 {classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    if separable:
        means = np.zeros((classes, dim))
        means[np.arange(classes), np.arange(classes)] = 5.0
        noise = np.clip(rng.standard_normal((n, dim)), -2.0, 2.0)
    else:
        means = rng.standard_normal((classes, dim))
        noise = rng.standard_normal((n, dim))
    images = (means[labels] + noise).reshape((n,) + shape)
    return Dataset(images, labels.astype(np.int64), split, classes, "synth")


# ========== 统一入口 ==========
def load_dataset(name: str, data_dir: str, seed: int = 0, sample_shape: Sequence[int] = (2,),
                 class_count: int = 10) -> Tuple[Dataset, Dataset]:
    """
    按名称加载 (train, test)；CIFAR 用 Settings 中的逐通道统计量归一化，MNIST 只缩放到 [0, 1]
    synth 按给定的样本形状与类别数生成
    """
    if name == "mnist":
        return load_mnist(data_dir)
    if name == "cifar10":
        train, test = load_cifar10(data_dir)
        mean, std = Settings.CIFAR10_MEAN, Settings.CIFAR10_STD
    elif name == "cifar100":
        train, test = load_cifar100(data_dir)
        mean, std = Settings.CIFAR100_MEAN, Settings.CIFAR100_STD
    elif name == "synth":
        dim = int(np.prod(sample_shape))
        separable = dim >= class_count
        train = synth_dataset(seed, 512, class_count, sample_shape, separable, "train")
        test = synth_dataset(seed + 1, 256, class_count, sample_shape, separable, "test")
        return train, test
    else:
        raise ConfigError(f"未知的数据集: {name}，可选 {DATASETS}")
    return normalize(train, mean, std), normalize(test, mean, std)


def load_data_node(state: PipelineState) -> dict:
    """数据加载节点"""
    logger.info("📥🗂️ [数据加载节点启动，正在读取数据集...]")
    try:
        command = state["command"]
        arch = state["arch"]
        seed = command.seed if command.seed is not None else Settings.SEED
        shape = arch.input_shape if arch is not None else (2,)
        classes = arch.num_classes if arch is not None else 10
        train, test = load_dataset(command.dataset, command.data_dir, seed, shape, classes)
        train = subset(train, command.subset, seed)
        logger.info(f"✅ 数据集 {command.dataset} 就绪：训练 {len(train)}，测试 {len(test)}，样本形状 {train.sample_shape}")
        return {
            "train_set": train,
            "test_set": test,
            "messages": [f"load_data: {command.dataset} train={len(train)} test={len(test)}"],
        }
    except Exception as e:
        logger.error(f"数据加载失败: {e}", exc_info=True)
        return error_update(e)
