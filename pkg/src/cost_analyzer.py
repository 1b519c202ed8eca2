"""
cost_analyzer.py
参数量与 FLOPs 统计：逐层精确计数、堆叠层闭式成本代数、全连接对照成本、
闭式结果与实际构建层的逐项核对，以及 CE / SE 效率分数
FLOPs 内部一律记为每样本乘加次数（MAC），只在展示时换算为 1·MAC 或 2·MAC 口径；
偏置、池化、激活和残差相加不计入，分类头计入
"""

import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from arch_spec import ArchSpec, LayerKind, LayerSpec, Shape, UnitKind, UnitSpec, infer_output_shape, shape_walk
from errors import ConfigError, DomainError, MissingFieldError
from logger_config import logger
from report_writer import format_table, write_csv, write_json, write_text
from state import PipelineState, error_update

SpatialSize = Union[int, Tuple[int, int]]


class FlopsConvention(Enum):
    """FLOPs 展示口径"""
    MAC = "mac"  # 1 次乘加记 1
    TWO_MAC = "2mac"  # 1 次乘加记 2（乘法与加法分开计）


def flops_in(macs: int, convention: Union[str, FlopsConvention]) -> int:
    convention = FlopsConvention(convention) if isinstance(convention, str) else convention
    return macs * 2 if convention == FlopsConvention.TWO_MAC else macs


# ========== 报告数据结构 ==========
@dataclass
class LayerCost:
    """单层计数；堆叠层额外带闭式成本与全连接对照成本"""
    name: str
    kind: str
    params: int
    flops: int  # MAC
    out_shape: Shape
    m: Optional[int] = None
    closed_params: Optional[int] = None
    closed_flops: Optional[int] = None
    dense_params: Optional[int] = None
    dense_flops: Optional[int] = None


@dataclass
class CostReport:
    arch_name: str
    layers: List[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    def totals(self) -> Dict[str, Any]:
        return {
            "params": self.total_params,
            "flops_mac": self.total_flops,
            "flops_2mac": flops_in(self.total_flops, FlopsConvention.TWO_MAC),
            "params_M": self.total_params / 1e6,
            "flops_mac_M": self.total_flops / 1e6,
            "flops_2mac_M": flops_in(self.total_flops, FlopsConvention.TWO_MAC) / 1e6,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "arch": self.arch_name,
            "totals": self.totals(),
            "layers": [
                {
                    "layer": c.name, "kind": c.kind, "params": c.params, "flops": c.flops,
                    "flops_2mac": 2 * c.flops, "out_shape": list(c.out_shape), "m": c.m,
                    "closed_params": c.closed_params, "closed_flops": c.closed_flops,
                    "dense_params": c.dense_params, "dense_flops": c.dense_flops,
                }
                for c in self.layers
            ],
        }


@dataclass
class BaselineRecord:
    """基线模型的精度、FLOPs 与参数量（单位由调用方统一即可）"""
    acc_b: float
    flops_b: float
    param_b: float

    def __post_init__(self):
        for label, value in (("acc_b", self.acc_b), ("flops_b", self.flops_b), ("param_b", self.param_b)):
            if not value > 0:
                raise DomainError(f"基线记录的 {label} 必须为正: {value}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BaselineRecord":
        values = {}
        for key, aliases in (("acc_b", ("acc_b", "acc", "accuracy")), ("flops_b", ("flops_b", "flops")),
                             ("param_b", ("param_b", "params", "param"))):
            found = next((data[a] for a in aliases if a in data and data[a] is not None), None)
            if found is None:
                raise MissingFieldError(f"基线记录缺少字段 {key}（可用别名 {list(aliases)}）")
            values[key] = float(found)
        return cls(**values)


@dataclass
class EfficiencyScores:
    ce: float
    se: float


@dataclass
class CrossCheck:
    """单个堆叠层：闭式成本与实际构建层逐项枚举的比较"""
    name: str
    closed_params: int
    closed_flops: int
    built_params: int
    built_flops: int
    closed_shape: Optional[Shape] = None
    built_shape: Optional[Shape] = None

    @property
    def passed(self) -> bool:
        return (self.closed_params == self.built_params and self.closed_flops == self.built_flops
                and self.closed_shape == self.built_shape)


# ========== 闭式成本代数 ==========
def _area(size: SpatialSize) -> int:
    if isinstance(size, (tuple, list)):
        h, w = size
        return int(h) * int(w)
    return int(size)


def stacked_costs_closed_form(m: int, d: int, c_h: int, c_in: int, c_out: int,
                              out_l: SpatialSize, out_r: SpatialSize) -> Tuple[int, int]:
    """
    m 个相同单元的堆叠层：
      M_s = m·d²·c_h·(c_in' + c_out')
      C_s = m·d²·c_h·(c_in'·w_outl·h_outl + w_outr·h_outr·c_out')
    out_l / out_r 为单元两层的输出空间尺寸 (h, w) 或面积
    """
    area_l, area_r = _area(out_l), _area(out_r)
    if min(m, d, c_h, c_in, c_out, area_l, area_r) < 1:
        raise DomainError(f"闭式成本的参数必须为正: m={m}, d={d}, c_h={c_h}, c_in'={c_in}, c_out'={c_out}")
    memory = m * d * d * c_h * (c_in + c_out)
    flops = m * d * d * c_h * (c_in * area_l + area_r * c_out)
    return memory, flops


def dense_costs_closed_form(m: int, d: int, c_h: int, c_in: int, c_out: int,
                            out_l: SpatialSize, out_r: SpatialSize) -> Tuple[int, int]:
    """同节点数的全连接对照：M_n = m²·d²·c_h·(c_in' + c_out') = m·M_s，C_n = m·C_s"""
    memory, flops = stacked_costs_closed_form(m, d, c_h, c_in, c_out, out_l, out_r)
    return m * memory, m * flops


def _unit_output_sizes(unit: UnitSpec, input_shape: Shape) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    if unit.kind == UnitKind.DENSE:
        return (1, 1), (1, 1)
    out_l = unit.left_geometry().output_size(*input_shape[1:])
    out_r = unit.right_geometry().output_size(*out_l)
    return out_l, out_r


def stacked_layer_closed_form(layer: LayerSpec, input_shape: Shape) -> Tuple[int, int]:
    """按相邻相同单元分段套用闭式；混合单元即各段闭式之和"""
    memory = flops = 0
    for unit, count in layer.stacked.runs():
        out_l, out_r = _unit_output_sizes(unit, input_shape)
        mem, fl = stacked_costs_closed_form(count, unit.kernel, unit.c_h, unit.c_in, unit.c_out, out_l, out_r)
        memory += mem
        flops += fl
    return memory, flops


def _dense_counterpart_costs(layer: LayerSpec, input_shape: Shape) -> Tuple[int, int]:
    """展开成 c_in -> Σc_h -> Σc_out' 两层普通层后的成本"""
    units = layer.stacked.units
    c_in, c_h, c_out = sum(u.c_in for u in units), sum(u.c_h for u in units), sum(u.c_out for u in units)
    d = units[0].kernel
    out_l, out_r = _unit_output_sizes(units[0], input_shape)
    memory = d * d * c_h * (c_in + c_out)
    flops = d * d * c_h * (c_in * _area(out_l) + _area(out_r) * c_out)
    return memory, flops


# ========== 逐层计数 ==========
def count_layer(layer: LayerSpec, input_shape: Shape) -> Tuple[int, int, Shape]:
    """返回 (参数量, MAC 数, 输出形状)；不含偏置"""
    out_shape = infer_output_shape(layer, input_shape)
    kind = layer.kind
    if kind == LayerKind.NORMAL_CONV:
        params = layer.kernel * layer.kernel * input_shape[0] * layer.out_channels
        return params, params * out_shape[1] * out_shape[2], out_shape
    if kind == LayerKind.DENSE:
        params = input_shape[0] * layer.out_channels
        return params, params, out_shape
    if kind in (LayerKind.STACKED_CONV, LayerKind.STACKED_DENSE):
        params = flops = 0
        for unit in layer.stacked.units:
            out_l, out_r = _unit_output_sizes(unit, input_shape)
            w_l = unit.kernel * unit.kernel * unit.c_in * unit.c_h
            w_r = unit.kernel * unit.kernel * unit.c_h * unit.c_out
            params += w_l + w_r
            flops += w_l * _area(out_l) + w_r * _area(out_r)
        return params, flops, out_shape
    if kind == LayerKind.RESIDUAL_BLOCK:
        params = flops = 0
        for _, sub, sub_in in iter_leaf_layers([layer], input_shape):
            p, f, _ = count_layer(sub, sub_in)
            params += p
            flops += f
        return params, flops, out_shape
    return 0, 0, out_shape


def iter_leaf_layers(layers: Sequence[LayerSpec], input_shape: Shape,
                     prefix: str = "") -> Iterator[Tuple[str, LayerSpec, Shape]]:
    """展开残差块，依次给出 (层路径名, 层描述, 输入形状)"""
    shape = tuple(input_shape)
    for index, layer in enumerate(layers):
        name = f"{prefix}{layer.name or f'{layer.kind.value}{index}'}"
        if layer.kind == LayerKind.RESIDUAL_BLOCK:
            yield from iter_leaf_layers(layer.main, shape, prefix=f"{name}.")
            if layer.shortcut is not None:
                yield from iter_leaf_layers([layer.shortcut], shape, prefix=f"{name}.")
        else:
            yield name, layer, shape
        shape = infer_output_shape(layer, shape)


def analyze(arch: ArchSpec) -> CostReport:
    """逐层统计整个网络（残差块展开为其内部各层）"""
    shape_walk(arch)
    report = CostReport(arch_name=arch.name)
    for name, layer, in_shape in iter_leaf_layers(arch.layers, arch.input_shape):
        params, flops, out_shape = count_layer(layer, in_shape)
        cost = LayerCost(name=name, kind=layer.kind.value, params=params, flops=flops, out_shape=tuple(out_shape))
        if layer.stacked is not None:
            cost.m = layer.stacked.m
            cost.closed_params, cost.closed_flops = stacked_layer_closed_form(layer, in_shape)
            cost.dense_params, cost.dense_flops = _dense_counterpart_costs(layer, in_shape)
        report.layers.append(cost)
        logger.debug(f"{name:<28} {layer.kind.value:<16} params={params:<10} macs={flops}")
    return report


# ========== 与实际构建层核对 ==========
def count_built_layer(layer, input_shape: Shape) -> Tuple[int, int, Shape]:
    """
    对实例化后的堆叠层做一次零输入前向，逐项枚举：
    参数量 = 各权重张量元素数之和（不含偏置），
    MAC = 每个权重元素乘以它实际产生的特征图面积（取自前向得到的隐藏层与输出张量）
    返回 (参数量, MAC 数, 实际输出形状)
    """
    dtype = layer.units[0].w_l.value.dtype
    y = layer.forward(np.zeros((1,) + tuple(input_shape), dtype=dtype))
    params = flops = 0
    for run, hidden, out in layer.feature_maps():
        area_l, area_r = int(np.prod(hidden.shape[2:])), int(np.prod(out.shape[2:]))
        for unit in run:
            params += unit.w_l.value.size + unit.w_r.value.size
            flops += unit.w_l.value.size * area_l + unit.w_r.value.size * area_r
    return params, flops, tuple(y.shape[1:])


def cross_check(arch: ArchSpec) -> List[CrossCheck]:
    """对网络中每个堆叠层比较闭式成本与实例化层的枚举结果"""
    from model_builder import build_layer

    rng = np.random.default_rng(0)
    checks = []
    for name, layer, in_shape in iter_leaf_layers(arch.layers, arch.input_shape):
        if layer.stacked is None:
            continue
        closed_params, closed_flops = stacked_layer_closed_form(layer, in_shape)
        built = build_layer(layer, in_shape, name, rng, np.float32)
        built_params, built_flops, built_shape = count_built_layer(built, in_shape)
        checks.append(CrossCheck(name, closed_params, closed_flops, built_params, built_flops,
                                 closed_shape=tuple(infer_output_shape(layer, in_shape)), built_shape=built_shape))
    failed = [c.name for c in checks if not c.passed]
    if failed:
        logger.warning(f"⚠️ 闭式成本与构建层不一致: {failed}")
    return checks


# ========== 效率分数 ==========
def compute_ce(acc_n: float, flops_n: float, base: BaselineRecord) -> float:
    """CE = (acc_n / flops_n) / (acc_b / flops_b)"""
    if not flops_n > 0:
        raise DomainError(f"flops_n 必须为正: {flops_n}")
    return (acc_n / flops_n) / (base.acc_b / base.flops_b)


def compute_se(acc_n: float, param_n: float, base: BaselineRecord) -> float:
    """SE = (acc_n / param_n) / (acc_b / param_b)"""
    if not param_n > 0:
        raise DomainError(f"param_n 必须为正: {param_n}")
    return (acc_n / param_n) / (base.acc_b / base.param_b)


def score(acc_n: float, flops_n: float, param_n: float, base: BaselineRecord) -> EfficiencyScores:
    return EfficiencyScores(ce=compute_ce(acc_n, flops_n, base), se=compute_se(acc_n, param_n, base))


# ========== 输出 ==========
REPORT_COLUMNS = ("layer", "kind", "params", "flops", "flops_2mac", "out_shape", "m",
                  "closed_params", "closed_flops", "dense_params", "dense_flops")


def format_cost_table(report: CostReport, checks: Optional[List[CrossCheck]] = None) -> str:
    rows = [
        [c.name, c.kind, c.params, c.flops, 2 * c.flops, c.out_shape, c.m if c.m is not None else ""]
        for c in report.layers
    ]
    totals = report.totals()
    lines = [
        f"架构: {report.arch_name}",
        format_table(("layer", "kind", "params", "flops(1·MAC)", "flops(2·MAC)", "out_shape", "m"), rows),
        "",
        f"总参数量: {totals['params']} ({totals['params_M']:.4f}M)",
        f"总 FLOPs (1·MAC): {totals['flops_mac']} ({totals['flops_mac_M']:.4f}M)",
        f"总 FLOPs (2·MAC): {totals['flops_2mac']} ({totals['flops_2mac_M']:.4f}M)",
    ]
    if checks is not None:
        status = "PASS" if all(c.passed for c in checks) else "FAIL"
        lines.append(f"闭式成本 vs 构建层核对: {status}（{len(checks)} 个堆叠层）")
    return "\n".join(lines)


def write_cost_report(report: CostReport, out_dir: str, header: Dict[str, Any],
                      checks: Optional[List[CrossCheck]] = None, stem: str = "cost_report") -> List[str]:
    """写出 CSV、JSON 和文本表格三种形式，返回文件路径"""
    rows = [
        [c.name, c.kind, c.params, c.flops, 2 * c.flops, "x".join(map(str, c.out_shape)),
         "" if c.m is None else c.m,
         "" if c.closed_params is None else c.closed_params, "" if c.closed_flops is None else c.closed_flops,
         "" if c.dense_params is None else c.dense_params, "" if c.dense_flops is None else c.dense_flops]
        for c in report.layers
    ]
    payload = report.to_dict()
    if checks is not None:
        payload["cross_check"] = {
            "status": "PASS" if all(c.passed for c in checks) else "FAIL",
            "layers": [
                {"layer": c.name, "closed_params": c.closed_params, "built_params": c.built_params,
                 "closed_flops": c.closed_flops, "built_flops": c.built_flops,
                 "closed_shape": c.closed_shape, "built_shape": c.built_shape, "passed": c.passed}
                for c in checks
            ],
        }
    return [
        write_csv(os.path.join(out_dir, f"{stem}.csv"), header, REPORT_COLUMNS, rows),
        write_json(os.path.join(out_dir, f"{stem}.json"), header, payload),
        write_text(os.path.join(out_dir, f"{stem}.txt"), header, format_cost_table(report, checks)),
    ]


def tradeoff_sweep(config: Dict[str, Any], c_h_values: Sequence[int],
                   strategies: Sequence[str] = ("all",)) -> List[Dict[str, Any]]:
    """对同一生成器配置遍历 c_h 与替换策略，给出成本对比行"""
    from arch_builder import build_from_config

    if not c_h_values:
        raise ConfigError("c_h 取值列表不能为空")
    rows = []
    for strategy in strategies:
        for c_h in c_h_values:
            variant = dict(config)
            if variant.get("builder") in ("vgg", "resnet"):
                variant.update(c_h=int(c_h), strategy=strategy)
            elif variant.get("unit") is not None:
                variant["unit"] = dict(variant["unit"], c_h=int(c_h))
            report = analyze(build_from_config(variant))
            totals = report.totals()
            rows.append({
                "strategy": strategy, "c_h": int(c_h), "params": totals["params"],
                "flops_mac": totals["flops_mac"], "flops_2mac": totals["flops_2mac"],
            })
    return rows


def analyze_cost_node(state: PipelineState) -> dict:
    """成本分析节点"""
    logger.info("📐🧮 [成本分析节点启动，正在统计参数量与 FLOPs...]")
    try:
        report = analyze(state["arch"])
        totals = report.totals()
        logger.info(
            f"✅ 参数量 {totals['params_M']:.4f}M，FLOPs {totals['flops_mac_M']:.4f}M (1·MAC) / "
            f"{totals['flops_2mac_M']:.4f}M (2·MAC)"
        )
        return {"cost_report": report, "messages": [f"analyze_cost: {totals['params']} params, {totals['flops_mac']} MACs"]}
    except Exception as e:
        logger.error(f"成本分析失败: {e}", exc_info=True)
        return error_update(e)


def score_totals(acc_n: float, totals: Dict[str, Any], base: BaselineRecord,
                 convention: Union[str, FlopsConvention] = FlopsConvention.TWO_MAC) -> EfficiencyScores:
    """用 CostReport.totals() 形式的计数打分；基线 FLOPs 必须与 convention 同一口径"""
    if acc_n is None:
        raise MissingFieldError("缺少被评模型的准确率，无法计算 CE/SE")
    flops_n = flops_in(int(totals["flops_mac"]), convention)
    return score(acc_n, flops_n, totals["params"], base)
