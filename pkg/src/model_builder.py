"""
model_builder.py
把 ArchSpec 实例化为可训练的 Model（Kaiming-uniform 初始化），以及检查点的保存/加载
"""

import json
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np

from arch_spec import ArchSpec, LayerKind, LayerSpec, Shape, UnitKind, infer_output_shape, shape_walk
from errors import ConfigError, DataFormatError, ShapeMismatchError
from layers import (
    BasicUnit, Conv2dLayer, DenseLayer, FlattenLayer, GlobalAvgPoolLayer, Layer, MaxPoolLayer, Model,
    ResidualBlock, SoftmaxLayer, StackedLayer,
)
from logger_config import logger
from settings import Settings
from state import PipelineState, error_update

PARAM_PREFIX = "param:"


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    """U(-b, b)，b = sqrt(6 / fan_in)（ReLU 增益下的 Kaiming-uniform）"""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _build_units(spec: LayerSpec, name: str, rng, dtype):
    units = []
    for k, unit_spec in enumerate(spec.stacked.units):
        d = unit_spec.kernel
        if unit_spec.kind == UnitKind.DENSE:
            shape_l, shape_r = (unit_spec.c_in, unit_spec.c_h), (unit_spec.c_h, unit_spec.c_out)
        else:
            shape_l = (unit_spec.c_h, unit_spec.c_in, d, d)
            shape_r = (unit_spec.c_out, unit_spec.c_h, d, d)
        # 单元自身的 fan-in，而不是整层宽度
        w_l = kaiming_uniform(rng, shape_l, unit_spec.c_in * d * d, dtype)
        w_r = kaiming_uniform(rng, shape_r, unit_spec.c_h * d * d, dtype)
        b_l = np.zeros(unit_spec.c_h, dtype=dtype) if spec.bias else None
        b_r = np.zeros(unit_spec.c_out, dtype=dtype) if spec.bias else None
        units.append(BasicUnit(f"{name}.unit{k}", unit_spec, w_l, w_r, b_l, b_r,
                               hidden_activation=spec.hidden_activation, activation=spec.activation))
    return units


def build_layer(spec: LayerSpec, input_shape: Shape, name: str, rng: np.random.Generator, dtype) -> Layer:
    """按层描述实例化一层，参数按层序从同一个随机数发生器依次抽取"""
    kind = spec.kind
    if kind == LayerKind.NORMAL_CONV:
        c_in, d = input_shape[0], spec.kernel
        weight = kaiming_uniform(rng, (spec.out_channels, c_in, d, d), c_in * d * d, dtype)
        bias = np.zeros(spec.out_channels, dtype=dtype) if spec.bias else None
        return Conv2dLayer(name, weight, bias, spec.stride, spec.padding, spec.activation)
    if kind == LayerKind.DENSE:
        n_in = input_shape[0]
        weight = kaiming_uniform(rng, (n_in, spec.out_channels), n_in, dtype)
        bias = np.zeros(spec.out_channels, dtype=dtype) if spec.bias else None
        return DenseLayer(name, weight, bias, spec.activation)
    if kind in (LayerKind.STACKED_CONV, LayerKind.STACKED_DENSE):
        return StackedLayer(name, _build_units(spec, name, rng, dtype))
    if kind == LayerKind.RESIDUAL_BLOCK:
        main, shape = [], input_shape
        for i, sub in enumerate(spec.main):
            main.append(build_layer(sub, shape, f"{name}.{sub.name or f'main{i}'}", rng, dtype))
            shape = infer_output_shape(sub, shape)
        shortcut = None
        if spec.shortcut is not None:
            shortcut = build_layer(spec.shortcut, input_shape, f"{name}.{spec.shortcut.name or 'shortcut'}", rng, dtype)
        return ResidualBlock(name, main, shortcut, spec.activation)
    if kind == LayerKind.POOL:
        return MaxPoolLayer(name, spec.kernel, spec.stride, spec.padding)
    if kind == LayerKind.GLOBAL_AVG_POOL:
        return GlobalAvgPoolLayer(name)
    if kind == LayerKind.FLATTEN:
        return FlattenLayer(name)
    if kind == LayerKind.SOFTMAX_OUTPUT:
        return SoftmaxLayer(name)
    raise ConfigError(f"未知的层类型: {kind}")


def build_model(arch: ArchSpec, dtype=np.float64, seed: Optional[int] = None) -> Model:
    """
    ArchSpec -> Model
    :param dtype: 参数精度（测试用 float64，训练可用 float32）
    :param seed: 初始化种子，默认取 arch.seed
    """
    walk = shape_walk(arch)
    rng = np.random.default_rng(arch.seed if seed is None else seed)
    layers = []
    for index, (spec, (_, in_shape, _)) in enumerate(zip(arch.layers, walk)):
        name = spec.name or f"{spec.kind.value}{index}"
        layers.append(build_layer(spec, in_shape, name, rng, dtype))
    model = Model(layers, arch.input_shape, name=arch.name)
    logger.debug(f"模型 {arch.name} 构建完成：{len(layers)} 层，{sum(p.value.size for p in model.parameters())} 个参数")
    return model


def save_checkpoint(path: str, model: Model, arch: ArchSpec, metadata: Optional[Dict[str, Any]] = None) -> str:
    """
    检查点是一个 .npz 容器：
      __arch__  ArchSpec 的 JSON 文本
      __meta__  元数据 JSON（epoch、精度、种子、版本）
      param:<name>  每个参数的小端序原始数组
    """
    if not path.endswith(".npz"):
        path = f"{path}.npz"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    meta = {"tool_version": Settings.TOOL_VERSION}
    meta.update(metadata or {})
    arrays = {
        "__arch__": np.array(json.dumps(arch.to_dict(), ensure_ascii=False)),
        "__meta__": np.array(json.dumps(meta, ensure_ascii=False)),
    }
    for p in model.parameters():
        arrays[PARAM_PREFIX + p.name] = p.value.astype(p.value.dtype.newbyteorder("<"), copy=False)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path: str) -> Tuple[Model, ArchSpec, Dict[str, Any]]:
    if not os.path.exists(path):
        raise ConfigError(f"检查点文件不存在: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arch = ArchSpec.from_dict(json.loads(str(data["__arch__"])))
            meta = json.loads(str(data["__meta__"]))
            values = {key[len(PARAM_PREFIX):]: data[key] for key in data.files if key.startswith(PARAM_PREFIX)}
    except (KeyError, ValueError, OSError) as e:
        if isinstance(e, ConfigError):
            raise
        raise DataFormatError(f"无法解析检查点 {path}: {e}")
    dtype = next(iter(values.values())).dtype.newbyteorder("=") if values else np.float64
    model = build_model(arch, dtype=dtype)
    if set(values) != {p.name for p in model.parameters()}:
        raise ShapeMismatchError(f"检查点 {path} 的参数集合与其架构不一致")
    model.load_state_dict(values)
    return model, arch, meta


def build_model_node(state: PipelineState) -> dict:
    """模型构建节点：实例化网络并核对数据集形状"""
    logger.info("🧱🔧 [模型构建节点启动，正在实例化网络...]")
    try:
        arch = state["arch"]
        sample_shape = tuple(state["train_set"].images.shape[1:])
        if sample_shape != tuple(arch.input_shape):
            raise ShapeMismatchError(f"数据集样本形状 {sample_shape} 与架构输入形状 {tuple(arch.input_shape)} 不一致")
        if state["train_set"].class_count != arch.num_classes:
            raise ShapeMismatchError(
                f"数据集类别数 {state['train_set'].class_count} 与架构类别数 {arch.num_classes} 不一致"
            )
        dtype = np.dtype(state["train_config"].precision)
        model = build_model(arch, dtype=dtype, seed=state["train_config"].seed)
        count = sum(p.value.size for p in model.parameters())
        logger.info(f"✅ 模型 {arch.name} 构建完成，参数总数（含偏置）: {count}")
        return {"model": model, "messages": [f"build_model: {arch.name} ({count} params)"]}
    except Exception as e:
        logger.error(f"模型构建失败: {e}", exc_info=True)
        return error_update(e)


def load_checkpoint_node(state: PipelineState) -> dict:
    """检查点加载节点：恢复模型及其架构"""
    logger.info("📦🔍 [检查点加载节点启动，正在恢复模型...]")
    try:
        path = state["command"].checkpoint
        model, arch, meta = load_checkpoint(path)
        logger.info(f"✅ 已从 {path} 恢复模型 {arch.name}（epoch {meta.get('epoch')}）")
        return {"model": model, "arch": arch, "checkpoint_meta": meta,
                "messages": [f"load_checkpoint: {path}"]}
    except Exception as e:
        logger.error(f"检查点加载失败: {e}", exc_info=True)
        return error_update(e)
