"""
arch_spec.py
架构描述的数据结构：基本单元、堆叠层、各类层以及整个网络，外加静态形状推导和字典序列化
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from errors import ConfigError, GeometryError, MissingFieldError, ShapeMismatchError
from tensor_ops import ConvGeometry

Shape = Tuple[int, ...]


class UnitKind(Enum):
    """基本单元的类型"""
    CONV = "conv"  # 两层卷积单元
    DENSE = "dense"  # 两层全连接单元（1x1 语义）


class LayerKind(Enum):
    """层类型"""
    NORMAL_CONV = "normal-conv"
    STACKED_CONV = "stacked-conv"
    DENSE = "dense"
    STACKED_DENSE = "stacked-dense"
    RESIDUAL_BLOCK = "residual-block"
    POOL = "pool"
    FLATTEN = "flatten"
    GLOBAL_AVG_POOL = "global-avg-pool"
    SOFTMAX_OUTPUT = "softmax-output"


class Replacement(Enum):
    """堆叠层替换策略"""
    ALL = "all"  # 替换所有可替换层
    INTERMEDIATE = "r"  # 首尾阶段保留普通层
    NONE = "none"  # 基线网络


ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class UnitSpec:
    """基本单元 {c_in', c_h, c_out'}"""
    c_in: int
    c_h: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None
    kind: UnitKind = UnitKind.CONV

    def __post_init__(self):
        for label, value in (("c_in'", self.c_in), ("c_h", self.c_h), ("c_out'", self.c_out)):
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"基本单元的 {label} 必须是正整数: {value}")
        if self.kind == UnitKind.DENSE:
            object.__setattr__(self, "kernel", 1)
            object.__setattr__(self, "stride", 1)
            object.__setattr__(self, "padding", 0)
        elif self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)
        # 触发几何参数校验
        self.left_geometry()

    def left_geometry(self, groups: int = 1) -> ConvGeometry:
        """第一层（W_l）几何：带步长"""
        return ConvGeometry(self.kernel, self.stride, self.padding, groups)

    def right_geometry(self, groups: int = 1) -> ConvGeometry:
        """第二层（W_r）几何：步长固定为 1"""
        return ConvGeometry(self.kernel, 1, self.padding, groups)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "c_in": self.c_in, "c_h": self.c_h, "c_out": self.c_out,
            "kernel": self.kernel, "stride": self.stride, "padding": self.padding,
            "kind": self.kind.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "UnitSpec":
        _require(data, ("c_in", "c_h", "c_out"), "unit")
        return cls(
            c_in=int(data["c_in"]), c_h=int(data["c_h"]), c_out=int(data["c_out"]),
            kernel=int(data.get("kernel", 3)), stride=int(data.get("stride", 1)),
            padding=None if data.get("padding") is None else int(data["padding"]),
            kind=_enum(UnitKind, data.get("kind", "conv"), "unit.kind"),
        )


@dataclass
class StackedLayerSpec:
    """m 个基本单元按通道切片并排堆叠"""
    units: List[UnitSpec]

    def __post_init__(self):
        if not self.units:
            raise ConfigError("堆叠层至少需要一个基本单元")
        first = self.units[0]
        for unit in self.units[1:]:
            if unit.kind != first.kind:
                raise ConfigError("同一堆叠层内单元类型必须一致")
            if (unit.kernel, unit.stride, unit.padding) != (first.kernel, first.stride, first.padding):
                raise ConfigError("同一堆叠层内单元的卷积几何必须一致，否则输出无法拼接")

    @property
    def m(self) -> int:
        return len(self.units)

    @property
    def input_sizes(self) -> List[int]:
        return [u.c_in for u in self.units]

    @property
    def output_sizes(self) -> List[int]:
        return [u.c_out for u in self.units]

    @property
    def kind(self) -> UnitKind:
        return self.units[0].kind

    def runs(self) -> List[Tuple[UnitSpec, int]]:
        """把相邻的相同单元合并为 (单元, 个数) 段，便于按分组卷积计算"""
        runs: List[Tuple[UnitSpec, int]] = []
        for unit in self.units:
            if runs and runs[-1][0] == unit:
                runs[-1] = (unit, runs[-1][1] + 1)
            else:
                runs.append((unit, 1))
        return runs


@dataclass
class LayerSpec:
    """单层描述；不同 kind 使用不同字段"""
    kind: LayerKind
    name: str = ""
    out_channels: Optional[int] = None  # normal-conv 输出通道 / dense 输出维度
    kernel: int = 1  # 卷积核或池化窗口
    stride: int = 1
    padding: int = 0
    activation: str = "relu"  # 输出激活
    hidden_activation: str = "relu"  # 堆叠单元内部第一层之后的激活
    bias: bool = True
    stacked: Optional[StackedLayerSpec] = None
    main: List["LayerSpec"] = field(default_factory=list)  # 残差主路径
    shortcut: Optional["LayerSpec"] = None  # None 表示恒等捷径

    def __post_init__(self):
        if self.activation not in ACTIVATIONS or self.hidden_activation not in ACTIVATIONS:
            raise ConfigError(f"层 {self.name} 的激活函数必须是 {ACTIVATIONS} 之一")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind.value, "name": self.name}
        if self.kind in (LayerKind.NORMAL_CONV, LayerKind.DENSE):
            data.update(out_channels=self.out_channels, activation=self.activation, bias=self.bias)
            if self.kind == LayerKind.NORMAL_CONV:
                data.update(kernel=self.kernel, stride=self.stride, padding=self.padding)
        elif self.kind in (LayerKind.STACKED_CONV, LayerKind.STACKED_DENSE):
            data.update(
                units=[u.to_dict() for u in self.stacked.units],
                activation=self.activation, hidden_activation=self.hidden_activation, bias=self.bias,
            )
        elif self.kind == LayerKind.POOL:
            data.update(kernel=self.kernel, stride=self.stride, padding=self.padding)
        elif self.kind == LayerKind.RESIDUAL_BLOCK:
            data.update(
                main=[layer.to_dict() for layer in self.main],
                shortcut=self.shortcut.to_dict() if self.shortcut else None,
                activation=self.activation,
            )
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        _require(data, ("kind",), "layer")
        kind = _enum(LayerKind, data["kind"], "layer.kind")
        spec = cls(
            kind=kind,
            name=data.get("name", ""),
            out_channels=data.get("out_channels"),
            kernel=int(data.get("kernel", 1)),
            stride=int(data.get("stride", data.get("kernel", 1) if kind == LayerKind.POOL else 1)),
            padding=int(data.get("padding", 0)),
            activation=data.get("activation", "relu"),
            hidden_activation=data.get("hidden_activation", "relu"),
            bias=bool(data.get("bias", True)),
        )
        if kind in (LayerKind.NORMAL_CONV, LayerKind.DENSE):
            _require(data, ("out_channels",), f"layer {spec.name}")
        if kind in (LayerKind.STACKED_CONV, LayerKind.STACKED_DENSE):
            _require(data, ("units",), f"layer {spec.name}")
            spec.stacked = StackedLayerSpec([UnitSpec.from_dict(u) for u in data["units"]])
        if kind == LayerKind.RESIDUAL_BLOCK:
            _require(data, ("main",), f"layer {spec.name}")
            spec.main = [cls.from_dict(layer) for layer in data["main"]]
            spec.shortcut = cls.from_dict(data["shortcut"]) if data.get("shortcut") else None
        return spec


@dataclass
class HybridPolicy:
    """混合单元策略：每个单元位置从候选池中均匀随机抽取"""
    pool: List[UnitSpec]
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if not self.pool:
            raise ConfigError("混合单元候选池不能为空")

    def to_dict(self) -> Dict[str, Any]:
        return {"pool": [u.to_dict() for u in self.pool], "seed": self.seed, "max_retries": self.max_retries}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HybridPolicy":
        _require(data, ("pool",), "hybrid")
        return cls(
            pool=[UnitSpec.from_dict(u) for u in data["pool"]],
            seed=int(data.get("seed", 0)),
            max_retries=int(data.get("max_retries", 100)),
        )


@dataclass
class ArchSpec:
    """完整网络描述"""
    name: str
    input_shape: Shape
    num_classes: int
    layers: List[LayerSpec]
    replacement: Replacement = Replacement.NONE
    hybrid: Optional[HybridPolicy] = None
    seed: int = 0
    family: str = "custom"
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if not self.input_shape or any(v < 1 for v in self.input_shape):
            raise ConfigError(f"输入形状非法: {self.input_shape}")
        if self.num_classes < 1:
            raise ConfigError(f"类别数必须为正整数: {self.num_classes}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "family": self.family,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "replacement": self.replacement.value,
            "hybrid": self.hybrid.to_dict() if self.hybrid else None,
            "seed": self.seed,
            "metadata": self.metadata,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArchSpec":
        _require(data, ("name", "input_shape", "num_classes", "layers"), "arch")
        layers = []
        for index, layer in enumerate(data["layers"]):
            try:
                layers.append(LayerSpec.from_dict(layer))
            except ConfigError as e:
                raise e.add_context(f"layers[{index}]")
        return cls(
            name=data["name"],
            input_shape=tuple(data["input_shape"]),
            num_classes=int(data["num_classes"]),
            layers=layers,
            replacement=_enum(Replacement, data.get("replacement", "none"), "replacement"),
            hybrid=HybridPolicy.from_dict(data["hybrid"]) if data.get("hybrid") else None,
            seed=int(data.get("seed", 0)),
            family=data.get("family", "custom"),
            metadata=dict(data.get("metadata") or {}),
        )


def _enum(enum_cls, value, where: str):
    try:
        return enum_cls(value)
    except ValueError:
        choices = [item.value for item in enum_cls]
        raise ConfigError(f"{where} 取值非法: {value!r}，可选 {choices}")


def _require(data: Dict[str, Any], fields: Tuple[str, ...], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} 必须是键值对象，实际为 {type(data).__name__}")
    for name in fields:
        if name not in data:
            raise MissingFieldError(f"{where} 缺少必要字段: {name}")


def stacked_output_shape(stacked: StackedLayerSpec, input_shape: Shape) -> Shape:
    """堆叠层输出形状；卷积单元先按 W_l 几何再按 W_r 几何推导空间尺寸"""
    channels = sum(stacked.input_sizes)
    if input_shape[0] != channels:
        raise ShapeMismatchError(f"堆叠层输入通道 {input_shape[0]} 与单元划分之和 {channels} 不一致")
    out_channels = sum(stacked.output_sizes)
    if stacked.kind == UnitKind.DENSE:
        if len(input_shape) != 1:
            raise ShapeMismatchError(f"堆叠全连接层需要一维输入，实际 {input_shape}")
        return (out_channels,)
    if len(input_shape) != 3:
        raise ShapeMismatchError(f"堆叠卷积层需要 [C,H,W] 输入，实际 {input_shape}")
    unit = stacked.units[0]
    h, w = unit.left_geometry().output_size(*input_shape[1:])
    h, w = unit.right_geometry().output_size(h, w)
    return (out_channels, h, w)


def infer_output_shape(layer: LayerSpec, input_shape: Shape) -> Shape:
    """单层静态形状推导（不含 batch 维）"""
    kind = layer.kind
    if kind == LayerKind.NORMAL_CONV:
        if len(input_shape) != 3:
            raise ShapeMismatchError(f"卷积层需要 [C,H,W] 输入，实际 {input_shape}")
        h, w = ConvGeometry(layer.kernel, layer.stride, layer.padding).output_size(*input_shape[1:])
        return (layer.out_channels, h, w)
    if kind == LayerKind.DENSE:
        if len(input_shape) != 1:
            raise ShapeMismatchError(f"全连接层需要一维输入，实际 {input_shape}")
        return (layer.out_channels,)
    if kind in (LayerKind.STACKED_CONV, LayerKind.STACKED_DENSE):
        return stacked_output_shape(layer.stacked, input_shape)
    if kind == LayerKind.POOL:
        if len(input_shape) != 3:
            raise ShapeMismatchError(f"池化层需要 [C,H,W] 输入，实际 {input_shape}")
        if layer.padding * 2 > layer.kernel:
            raise GeometryError(f"池化填充 {layer.padding} 超过窗口的一半 {layer.kernel}")
        h, w = ConvGeometry(layer.kernel, layer.stride, layer.padding).output_size(*input_shape[1:])
        return (input_shape[0], h, w)
    if kind == LayerKind.GLOBAL_AVG_POOL:
        if len(input_shape) != 3:
            raise ShapeMismatchError(f"全局平均池化需要 [C,H,W] 输入，实际 {input_shape}")
        return (input_shape[0],)
    if kind == LayerKind.FLATTEN:
        size = 1
        for v in input_shape:
            size *= v
        return (size,)
    if kind == LayerKind.SOFTMAX_OUTPUT:
        if len(input_shape) != 1:
            raise ShapeMismatchError(f"softmax 输出层需要一维输入，实际 {input_shape}")
        return input_shape
    if kind == LayerKind.RESIDUAL_BLOCK:
        main_shape = input_shape
        for sub in layer.main:
            main_shape = _walk_one(sub, main_shape)
        short_shape = _walk_one(layer.shortcut, input_shape) if layer.shortcut else input_shape
        if tuple(main_shape) != tuple(short_shape):
            raise ShapeMismatchError(f"残差块主路径输出 {main_shape} 与捷径输出 {short_shape} 不一致")
        return tuple(main_shape)
    raise ConfigError(f"未知的层类型: {kind}")


def _walk_one(layer: LayerSpec, shape: Shape) -> Shape:
    try:
        return infer_output_shape(layer, shape)
    except ConfigError as e:
        raise e.add_context(f"层 {layer.name or layer.kind.value}")


def shape_walk(arch: ArchSpec) -> List[Tuple[str, Shape, Shape]]:
    """逐层推导形状，返回 [(层名, 输入形状, 输出形状)]，首个不一致的层会被报出"""
    records = []
    shape = tuple(arch.input_shape)
    for layer in arch.layers:
        out = _walk_one(layer, shape)
        records.append((layer.name, shape, tuple(out)))
        shape = tuple(out)
    if shape != (arch.num_classes,):
        raise ShapeMismatchError(f"网络输出形状 {shape} 与类别数 {arch.num_classes} 不一致")
    return records

