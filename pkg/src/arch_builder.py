"""
arch_builder.py
声明式地生成网络结构：单元堆叠（统一/混合）、MLP / VGG / ResNet / LeNet 风格的 TissueNet，
以及把堆叠层展开成等价全连接对照网络的 densify
"""

import copy
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from arch_spec import (
    ArchSpec, HybridPolicy, LayerKind, LayerSpec, Replacement, Shape, StackedLayerSpec, UnitKind, UnitSpec,
    infer_output_shape, shape_walk,
)
from errors import ConfigError, PartitionError, PolicyError
from logger_config import logger
from settings import Settings

VGG_PLANS = {
    "vgg16": [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]],
    "vgg19": [[64, 64], [128, 128], [256] * 4, [512] * 4, [512] * 4],
}
VGG_BASES = {
    "vgg16-cifar": ("vgg16", (3, 32, 32), 100),
    "vgg16": ("vgg16", (3, 32, 32), 100),
    "vgg19-tiny": ("vgg19", (3, 64, 64), 200),
    "vgg19": ("vgg19", (3, 32, 32), 100),
}
RESNET_BLOCKS = {
    "resnet18": (2, 2, 2, 2),
    "resnet34": (3, 4, 6, 3),
}
RESNET_WIDTHS = (64, 128, 256, 512)
# 每个阶段的块构造方式：normal 普通块；mixed 堆叠层(带步长) + 普通 3x3(负责加宽)；stacked 两个堆叠层
RESNET_STAGE_MODES = {
    Replacement.ALL: ("mixed", "mixed", "stacked", "mixed"),
    Replacement.INTERMEDIATE: ("normal", "mixed", "stacked", "normal"),
    Replacement.NONE: ("normal", "normal", "normal", "normal"),
}

UnitOrPool = Union[UnitSpec, Sequence[UnitSpec]]


def _reachable_sums(widths: Sequence[int], target: int) -> List[bool]:
    reach = [False] * (target + 1)
    reach[0] = True
    for total in range(1, target + 1):
        reach[total] = any(w <= total and reach[total - w] for w in widths)
    return reach


def stack_units(pool_or_unit: UnitOrPool, c_in: int, policy: Optional[HybridPolicy] = None,
                salt: int = 0) -> StackedLayerSpec:
    """
    把 c_in 个输入通道划分给基本单元
    统一单元：m = c_in / c_in'，不能整除时报 PartitionError
    混合单元：每个位置从候选池均匀抽取；抽到的单元会让剩余宽度无法拼出时重抽，
    超过 policy.max_retries 次仍失败则报 PolicyError。同一 (seed, salt) 抽取结果固定
    """
    if c_in < 1:
        raise PartitionError(c_in, 0, f"输入通道数必须为正整数: {c_in}")
    if policy is None and isinstance(pool_or_unit, UnitSpec):
        unit = pool_or_unit
        if c_in % unit.c_in != 0:
            raise PartitionError(c_in, unit.c_in)
        return StackedLayerSpec([unit] * (c_in // unit.c_in))

    if isinstance(pool_or_unit, UnitSpec):
        pool = list(policy.pool)
    else:
        pool = list(pool_or_unit)
    policy = policy or HybridPolicy(pool=pool)
    reach = _reachable_sums(sorted({u.c_in for u in pool}), c_in)
    if not reach[c_in]:
        raise PolicyError(f"候选单元的 c_in' {[u.c_in for u in pool]} 无法拼出输入宽度 {c_in}")
    rng = np.random.default_rng([policy.seed, salt])
    units, remaining = [], c_in
    while remaining:
        for _ in range(policy.max_retries):
            candidate = pool[int(rng.integers(len(pool)))]
            if candidate.c_in <= remaining and reach[remaining - candidate.c_in]:
                break
        else:
            raise PolicyError(f"连续 {policy.max_retries} 次抽取都无法拼出剩余宽度 {remaining}（总宽 {c_in}）")
        units.append(candidate)
        remaining -= candidate.c_in
    return StackedLayerSpec(units)


def _stacked_layer(name: str, units: StackedLayerSpec, activation: str = "relu") -> LayerSpec:
    kind = LayerKind.STACKED_DENSE if units.kind == UnitKind.DENSE else LayerKind.STACKED_CONV
    return LayerSpec(kind=kind, name=name, stacked=units, activation=activation)


def _conv(name: str, out_channels: int, kernel: int = 3, stride: int = 1, padding: Optional[int] = None,
          activation: str = "relu") -> LayerSpec:
    return LayerSpec(
        kind=LayerKind.NORMAL_CONV, name=name, out_channels=out_channels, kernel=kernel, stride=stride,
        padding=kernel // 2 if padding is None else padding, activation=activation,
    )


def _dense(name: str, out_features: int, activation: str = "relu") -> LayerSpec:
    return LayerSpec(kind=LayerKind.DENSE, name=name, out_channels=out_features, activation=activation)


def _pool(name: str, window: int = 2, stride: Optional[int] = None, padding: int = 0) -> LayerSpec:
    return LayerSpec(kind=LayerKind.POOL, name=name, kernel=window, stride=stride or window, padding=padding)


def _as_replacement(strategy: Union[str, Replacement]) -> Replacement:
    if isinstance(strategy, Replacement):
        return strategy
    try:
        return Replacement(strategy)
    except ValueError:
        raise ConfigError(f"未知的替换策略: {strategy}，可选 {[r.value for r in Replacement]}")


def _finish(arch: ArchSpec) -> ArchSpec:
    shape_walk(arch)
    logger.debug(f"架构 {arch.name} 生成完成，共 {len(arch.layers)} 层")
    return arch


def _unit_for(c_in: int, c_h: int, unit_in: Optional[int], unit_out: Optional[int], kind: UnitKind,
              kernel: int = 3, stride: int = 1) -> UnitSpec:
    """unit_in 为 None 时单元覆盖整层宽度（m = 1）"""
    if unit_in is None:
        return UnitSpec(c_in, c_h, c_in if unit_out is None else unit_out, kernel, stride, kind=kind)
    return UnitSpec(unit_in, c_h, unit_out, kernel, stride, kind=kind)


def _stack(unit: UnitSpec, c_in: int, policy: Optional[HybridPolicy], salt: int) -> StackedLayerSpec:
    if policy is None:
        return stack_units(unit, c_in)
    # 混合池中的单元沿用当前位置的几何
    pool = [replace(u, kind=unit.kind, kernel=unit.kernel, stride=unit.stride, padding=unit.padding)
            for u in policy.pool]
    return stack_units(pool, c_in, replace(policy, pool=pool), salt=salt)


# ========== MLP ==========
def build_mlp_style(widths: Sequence[int], unit: Optional[UnitSpec] = None, policy: Optional[HybridPolicy] = None,
                    mixing_widths: Sequence[int] = (), input_shape: Optional[Shape] = None,
                    name: Optional[str] = None, seed: int = 0) -> ArchSpec:
    """
    widths 为基线 MLP 的各层宽度（如 784-500-300-10）
    unit 与 policy 都为空时生成基线 MLP；否则生成 TissueNet：
    展平 -> 堆叠全连接层 -> [普通全连接 w -> 堆叠全连接层]（对 mixing_widths 中每个 w）-> 线性分类头
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ConfigError(f"MLP 宽度序列非法: {widths}")
    input_shape = tuple(input_shape) if input_shape else (widths[0],)
    if int(np.prod(input_shape)) != widths[0]:
        raise ConfigError(f"输入形状 {input_shape} 的元素数与 widths[0]={widths[0]} 不一致")
    num_classes = widths[-1]
    layers = [LayerSpec(kind=LayerKind.FLATTEN, name="flatten")]
    baseline = unit is None and policy is None
    if baseline:
        for i, width in enumerate(widths[1:-1]):
            layers.append(_dense(f"fc{i + 1}", width))
        layers.append(_dense("head", num_classes, activation="identity"))
        tag = "baseline"
    else:
        unit = replace(unit or policy.pool[0], kind=UnitKind.DENSE)
        salt = 0
        layers.append(_stacked_layer("stacked1", _stack(unit, widths[0], policy, salt)))
        for i, width in enumerate(mixing_widths):
            salt += 1
            layers.append(_dense(f"mix{i + 1}", width))
            layers.append(_stacked_layer(f"stacked{i + 2}", _stack(unit, width, policy, salt)))
        layers.append(_dense("head", num_classes, activation="identity"))
        tag = f"tissuenet-ch{unit.c_h}"
    arch = ArchSpec(
        name=name or f"mlp-{'-'.join(map(str, widths))}-{tag}",
        input_shape=input_shape, num_classes=num_classes, layers=layers,
        replacement=Replacement.NONE if baseline else Replacement.ALL, hybrid=policy, seed=seed, family="mlp",
        metadata={"baseline_widths": widths, "mixing_widths": list(mixing_widths)},
    )
    return _finish(arch)


# ========== VGG ==========
def build_vgg_style(base: str = "vgg16-cifar", c_h: int = Settings.UNIT_HIDDEN,
                    strategy: Union[str, Replacement] = "all", unit_in: Optional[int] = Settings.UNIT_IN,
                    unit_out: Optional[int] = Settings.UNIT_OUT, num_classes: Optional[int] = None,
                    input_shape: Optional[Shape] = None, width_divisor: int = 1,
                    policy: Optional[HybridPolicy] = None, name: Optional[str] = None, seed: int = 0) -> ArchSpec:
    """
    每个阶段第一个卷积（负责加宽）保留普通层，其余卷积替换为堆叠层；阶段末 2x2 最大池化；
    分类器为全局平均池化 + 一个线性层。策略 r 下首尾阶段整体保留普通层
    """
    if base not in VGG_BASES:
        raise ConfigError(f"未知的 VGG 基础结构: {base}，可选 {sorted(VGG_BASES)}")
    plan_name, default_shape, default_classes = VGG_BASES[base]
    plan = VGG_PLANS[plan_name]
    strategy = _as_replacement(strategy)
    input_shape = tuple(input_shape or default_shape)
    num_classes = num_classes or default_classes
    if width_divisor < 1:
        raise ConfigError(f"width_divisor 必须 >= 1: {width_divisor}")

    layers: List[LayerSpec] = []
    channels, salt = input_shape[0], 0
    last_stage = len(plan) - 1
    for s, stage in enumerate(plan):
        eligible = strategy == Replacement.ALL or (strategy == Replacement.INTERMEDIATE and 0 < s < last_stage)
        for c, width in enumerate(stage):
            layer_name = f"stage{s + 1}.conv{c + 1}"
            if c == 0 or not eligible:
                width = max(1, width // width_divisor)
                layers.append(_conv(layer_name, width))
                channels = width
            else:
                unit = _unit_for(channels, c_h, unit_in, unit_out, UnitKind.CONV)
                stacked = _stack(unit, channels, policy, salt)
                salt += 1
                layers.append(_stacked_layer(layer_name, stacked))
                channels = sum(stacked.output_sizes)
        layers.append(_pool(f"stage{s + 1}.pool"))
    layers.append(LayerSpec(kind=LayerKind.GLOBAL_AVG_POOL, name="gap"))
    layers.append(_dense("fc", num_classes, activation="identity"))
    arch = ArchSpec(
        name=name or f"{base}-{strategy.value}-ch{c_h}",
        input_shape=input_shape, num_classes=num_classes, layers=layers, replacement=strategy,
        hybrid=policy, seed=seed, family="vgg",
        metadata={"base": base, "c_h": c_h, "unit_in": unit_in, "unit_out": unit_out, "width_divisor": width_divisor},
    )
    return _finish(arch)


# ========== ResNet ==========
def _resnet_block(name: str, mode: str, c_in: int, c_out: int, stride: int, c_h: int,
                  unit_in: Optional[int], unit_out: Optional[int], policy: Optional[HybridPolicy],
                  salt: int, in_shape: Shape) -> Tuple[LayerSpec, int]:
    if mode == "normal":
        main = [_conv("conv1", c_out, 3, stride), _conv("conv2", c_out, 3, 1, activation="identity")]
    elif mode == "mixed":
        unit = _unit_for(c_in, c_h, unit_in, unit_out, UnitKind.CONV, stride=stride)
        main = [_stacked_layer("stacked1", _stack(unit, c_in, policy, salt)),
                _conv("conv2", c_out, 3, 1, activation="identity")]
    elif mode == "stacked":
        if unit_in is None:
            widen = UnitSpec(c_in, c_h, c_out, 3, stride)
        else:
            if (unit_out * c_out) % c_in != 0:
                raise ConfigError(f"块 {name}: 无法用 c_out'={unit_out} 的单元把宽度从 {c_in} 扩到 {c_out}")
            widen = UnitSpec(unit_in, c_h, unit_out * c_out // c_in, 3, stride)
        first = _stack(widen, c_in, policy, salt)
        mid = sum(first.output_sizes)
        second = _stack(_unit_for(mid, c_h, unit_in, unit_out, UnitKind.CONV), mid, policy, salt + 1)
        main = [_stacked_layer("stacked1", first), _stacked_layer("stacked2", second, activation="identity")]
    else:
        raise ConfigError(f"未知的残差块构造方式: {mode}")

    shape = in_shape
    for layer in main:
        shape = infer_output_shape(layer, shape)
    shortcut = None
    if stride != 1 or shape[0] != c_in:
        shortcut = _conv("shortcut", shape[0], kernel=1, stride=stride, padding=0, activation="identity")
    block = LayerSpec(kind=LayerKind.RESIDUAL_BLOCK, name=name, main=main, shortcut=shortcut)
    return block, shape[0]


def build_resnet_style(base: str = "resnet18", c_h: int = Settings.UNIT_HIDDEN,
                       strategy: Union[str, Replacement] = "all", unit_in: Optional[int] = Settings.UNIT_IN,
                       unit_out: Optional[int] = Settings.UNIT_OUT, num_classes: int = 100,
                       input_shape: Shape = (3, 32, 32), width_divisor: int = 1,
                       policy: Optional[HybridPolicy] = None, name: Optional[str] = None, seed: int = 0) -> ArchSpec:
    """
    基本块 ResNet；下采样由堆叠层单元的步长完成，投影捷径为 1x1 步长卷积
    输入边长不超过 64 时用 CIFAR 式 3x3 步长 1 的 stem，否则用 7x7 步长 2 + 最大池化
    """
    if base not in RESNET_BLOCKS:
        raise ConfigError(f"未知的 ResNet 基础结构: {base}，可选 {sorted(RESNET_BLOCKS)}")
    strategy = _as_replacement(strategy)
    modes = RESNET_STAGE_MODES[strategy]
    input_shape = tuple(input_shape)
    widths = [max(1, w // width_divisor) for w in RESNET_WIDTHS]

    if input_shape[1] <= 64:
        layers = [_conv("stem", widths[0], 3, 1)]
    else:
        layers = [_conv("stem", widths[0], 7, 2, padding=3), _pool("stem.pool", 3, 2, padding=1)]
    shape = input_shape
    for layer in layers:
        shape = infer_output_shape(layer, shape)

    channels, salt = widths[0], 0
    for s, (blocks, width) in enumerate(zip(RESNET_BLOCKS[base], widths)):
        for b in range(blocks):
            stride = 2 if (s > 0 and b == 0) else 1
            block, channels = _resnet_block(
                f"layer{s + 1}.block{b + 1}", modes[s], shape[0], width, stride, c_h,
                unit_in, unit_out, policy, salt, shape,
            )
            salt += 2
            layers.append(block)
            shape = infer_output_shape(block, shape)
    layers.append(LayerSpec(kind=LayerKind.GLOBAL_AVG_POOL, name="gap"))
    layers.append(_dense("fc", num_classes, activation="identity"))
    arch = ArchSpec(
        name=name or f"{base}-{strategy.value}-ch{c_h}",
        input_shape=input_shape, num_classes=num_classes, layers=layers, replacement=strategy,
        hybrid=policy, seed=seed, family="resnet",
        metadata={"base": base, "c_h": c_h, "unit_in": unit_in, "unit_out": unit_out,
                  "stage_modes": list(modes), "width_divisor": width_divisor},
    )
    return _finish(arch)


# ========== LeNet ==========
def build_lenet_style(unit: Optional[UnitSpec] = None, policy: Optional[HybridPolicy] = None,
                      num_classes: int = 10, input_shape: Shape = (1, 28, 28), hidden: int = 32,
                      name: Optional[str] = None, seed: int = 0) -> ArchSpec:
    """
    LeNet-5 风格：两个 5x5 卷积之后各接一个 3x3 堆叠层负责组内特征变换
    unit 与 policy 都为空时生成经典 LeNet-5 基线（全连接 120-84）
    """
    baseline = unit is None and policy is None
    layers = [_conv("conv1", 6, 5, 1, padding=2), _pool("pool1", 2)]
    shape = infer_output_shape(layers[1], infer_output_shape(layers[0], tuple(input_shape)))
    if not baseline:
        unit = replace(unit or policy.pool[0], kernel=3, stride=1, padding=1, kind=UnitKind.CONV)
        stacked = _stack(unit, shape[0], policy, 0)
        layers.append(_stacked_layer("stacked1", stacked))
    layers += [_conv("conv2", 16, 5, 1, padding=0), _pool("pool2", 2)]
    if not baseline:
        layers.append(_stacked_layer("stacked2", _stack(unit, 16, policy, 1)))
    layers.append(LayerSpec(kind=LayerKind.FLATTEN, name="flatten"))
    if baseline:
        layers += [_dense("fc1", 120), _dense("fc2", 84)]
    else:
        layers.append(_dense("fc1", hidden))
    layers.append(_dense("head", num_classes, activation="identity"))
    if baseline:
        tag = "baseline"
    elif policy is not None:
        tag = "hybrid"
    else:
        tag = f"ch{unit.c_h}"
    arch = ArchSpec(
        name=name or f"lenet5-{tag}", input_shape=tuple(input_shape), num_classes=num_classes, layers=layers,
        replacement=Replacement.NONE if baseline else Replacement.ALL, hybrid=policy, seed=seed, family="lenet",
    )
    return _finish(arch)


# ========== 全连接对照网络 ==========
def _densify_layer(layer: LayerSpec) -> List[LayerSpec]:
    if layer.kind == LayerKind.RESIDUAL_BLOCK:
        block = copy.deepcopy(layer)
        block.main = [out for sub in layer.main for out in _densify_layer(sub)]
        return [block]
    if layer.kind not in (LayerKind.STACKED_CONV, LayerKind.STACKED_DENSE):
        return [copy.deepcopy(layer)]
    units = layer.stacked.units
    hidden = sum(u.c_h for u in units)
    out = sum(u.c_out for u in units)
    if layer.kind == LayerKind.STACKED_DENSE:
        return [
            LayerSpec(kind=LayerKind.DENSE, name=f"{layer.name}.dense_l", out_channels=hidden,
                      activation=layer.hidden_activation, bias=layer.bias),
            LayerSpec(kind=LayerKind.DENSE, name=f"{layer.name}.dense_r", out_channels=out,
                      activation=layer.activation, bias=layer.bias),
        ]
    head = units[0]
    return [
        LayerSpec(kind=LayerKind.NORMAL_CONV, name=f"{layer.name}.conv_l", out_channels=hidden,
                  kernel=head.kernel, stride=head.stride, padding=head.padding,
                  activation=layer.hidden_activation, bias=layer.bias),
        LayerSpec(kind=LayerKind.NORMAL_CONV, name=f"{layer.name}.conv_r", out_channels=out,
                  kernel=head.kernel, stride=1, padding=head.padding,
                  activation=layer.activation, bias=layer.bias),
    ]


def densify(arch: ArchSpec) -> ArchSpec:
    """把每个堆叠层换成它所约束的两层全连接卷积（c_in -> Σc_h -> Σc_out'）"""
    layers = [out for layer in arch.layers for out in _densify_layer(layer)]
    dense = ArchSpec(
        name=f"{arch.name}-dense", input_shape=arch.input_shape, num_classes=arch.num_classes, layers=layers,
        replacement=Replacement.NONE, seed=arch.seed, family=arch.family, metadata=dict(arch.metadata),
    )
    return _finish(dense)


# ========== 配置文件入口 ==========
BUILDERS = {
    "mlp": build_mlp_style,
    "vgg": build_vgg_style,
    "resnet": build_resnet_style,
    "lenet": build_lenet_style,
}


def build_from_config(data: Dict[str, Any]) -> ArchSpec:
    """
    配置文件的生成器形式：{"builder": "vgg", "base": "vgg16-cifar", "c_h": 4, ...}
    unit / policy 字段为嵌套对象，其余字段原样作为生成函数的关键字参数
    """
    kwargs = {k: v for k, v in data.items() if k not in ("builder", "train", "densify")}
    builder_name = data.get("builder")
    if builder_name not in BUILDERS:
        raise ConfigError(f"未知的 builder: {builder_name}，可选 {sorted(BUILDERS)}")
    if "unit" in kwargs and kwargs["unit"] is not None:
        kwargs["unit"] = UnitSpec.from_dict(kwargs["unit"])
    if "policy" in kwargs and kwargs["policy"] is not None:
        kwargs["policy"] = HybridPolicy.from_dict(kwargs["policy"])
    for key in ("input_shape", "widths", "mixing_widths"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    try:
        arch = BUILDERS[builder_name](**kwargs)
    except TypeError as e:
        raise ConfigError(f"builder {builder_name} 参数错误: {e}")
    arch.metadata.setdefault("builder", builder_name)
    return densify(arch) if data.get("densify") else arch
