"""
grad_check.py
中心差分数值梯度，用于核对各层、损失函数以及整个模型的解析反向传播
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from layers import Layer, Model, cross_entropy
from settings import Settings


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = Settings.GRAD_CHECK_STEP) -> np.ndarray:
    """
    对 x 原地逐元素扰动，grad[i] = (f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)
    f 必须在每次调用时重新读取 x 的当前取值
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + eps
        plus = f()
        flat_x[i] = original - eps
        minus = f()
        flat_x[i] = original
        flat_grad[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a|| + ||n||, 1e-12)"""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric))
    return float(diff / max(scale, 1e-12))


@dataclass
class GradCheckResult:
    errors: Dict[str, float] = field(default_factory=dict)  # 名称 -> 相对误差

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_error <= tolerance


def check_layer(layer: Layer, x: np.ndarray, rng: Optional[np.random.Generator] = None,
                eps: float = Settings.GRAD_CHECK_STEP) -> GradCheckResult:
    """
    以随机投影 L = Σ forward(x)·g 为目标，核对输入梯度与全部参数梯度
    x 与参数应为 float64
    """
    rng = rng or np.random.default_rng(0)
    x = np.array(x, dtype=np.float64)
    direction = rng.standard_normal(layer.forward(x).shape)

    def objective() -> float:
        return float(np.sum(layer.forward(x) * direction))

    for p in layer.parameters():
        p.zero_grad()
    layer.forward(x)
    grad_x = layer.backward(direction)
    result = GradCheckResult()
    result.errors["input"] = relative_error(grad_x, numerical_grad(objective, x, eps))
    for p in layer.parameters():
        result.errors[p.name] = relative_error(p.grad, numerical_grad(objective, p.value, eps))
    return result


def check_loss(logits: np.ndarray, labels: np.ndarray, eps: float = Settings.GRAD_CHECK_STEP) -> float:
    """交叉熵对 logits 的梯度的相对误差"""
    logits = np.array(logits, dtype=np.float64)
    _, grad = cross_entropy(logits, labels)
    numeric = numerical_grad(lambda: cross_entropy(logits, labels)[0], logits, eps)
    return relative_error(grad, numeric)


def check_model(model: Model, x: np.ndarray, labels: np.ndarray,
                eps: float = Settings.GRAD_CHECK_STEP) -> GradCheckResult:
    """整个模型 + 交叉熵损失，对所有参数做数值核对"""
    x = np.array(x, dtype=np.float64)

    def objective() -> float:
        return cross_entropy(model.forward(x), labels)[0]

    model.zero_grad()
    _, grad = cross_entropy(model.forward(x), labels)
    model.backward(grad)
    result = GradCheckResult()
    for p in model.parameters():
        result.errors[p.name] = relative_error(p.grad, numerical_grad(objective, p.value, eps))
    return result
