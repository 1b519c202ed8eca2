"""
errors.py
统一异常体系：每个异常带有机器可读的 category，CLI 据此输出单行错误
"""

from typing import Optional


class TissueNetError(Exception):
    """所有领域异常的基类"""
    category = "internal"

    def add_context(self, where: str) -> "TissueNetError":
        """在消息前加上出错位置，返回自身以便直接 raise"""
        if self.args:
            self.args = (f"{where}: {self.args[0]}",) + tuple(self.args[1:])
        return self


class ConfigError(TissueNetError, ValueError):
    """配置非法：参数取值、配置文件格式等"""
    category = "config"


class MissingFieldError(ConfigError):
    """记录/配置中缺少必要字段"""
    category = "missing-field"


class GeometryError(ConfigError):
    """卷积/池化几何参数非法或输出尺寸小于 1"""
    category = "geometry"


class PartitionError(ConfigError):
    """通道数无法按基本单元划分"""
    category = "partition"

    def __init__(self, c_in: int, unit_in: int, message: Optional[str] = None):
        self.c_in = c_in
        self.unit_in = unit_in
        super().__init__(message or f"输入通道数 {c_in} 不能被单元输入宽度 {unit_in} 整除")


class ShapeMismatchError(ConfigError):
    """层与层之间形状不匹配"""
    category = "shape"


class PolicyError(ConfigError):
    """混合单元策略无法拼出目标宽度"""
    category = "policy"


class DomainError(TissueNetError, ValueError):
    """数值定义域错误（如除以零的基线）"""
    category = "domain"


class StateError(TissueNetError, RuntimeError):
    """对象状态不满足调用前提（如梯度未初始化）"""
    category = "state"


class DataFormatError(TissueNetError, ValueError):
    """数据文件格式错误"""
    category = "data-format"


class NonFiniteLossError(TissueNetError, FloatingPointError):
    """训练损失出现 NaN/Inf"""
    category = "non-finite"

    def __init__(self, message: str, layer_name: Optional[str] = None, epoch: Optional[int] = None):
        self.layer_name = layer_name
        self.epoch = epoch
        super().__init__(message)
