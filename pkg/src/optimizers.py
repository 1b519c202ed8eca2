"""
optimizers.py
SGD-momentum 与 Adam（解耦权重衰减）的参数更新，以及线性预热 + 余弦退火的学习率调度
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from errors import ConfigError, DomainError, StateError
from layers import Parameter
from state import TrainConfig


@dataclass
class OptimizerState:
    """按参数名保存的优化器状态，首次更新时惰性创建"""
    step: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def _check_grads(params: Sequence[Parameter]):
    for p in params:
        if p.grad is None:
            raise StateError(f"参数 {p.name} 的梯度尚未初始化，请先执行反向传播")


def sgd_momentum_step(params: Sequence[Parameter], state: OptimizerState, lr: float,
                      momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """v <- momentum·v + (grad + weight_decay·w)；w <- w - lr·v"""
    _check_grads(params)
    for p in params:
        v = state.velocity.get(p.name)
        if v is None:
            v = state.velocity[p.name] = np.zeros_like(p.value)
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.value
        p.value -= lr * v
    state.step += 1


def adam_step(params: Sequence[Parameter], state: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 0.01, weight_decay: float = 0.0) -> None:
    """带偏差修正的 Adam；权重衰减解耦，先做 w <- w - lr·wd·w 再做自适应更新"""
    _check_grads(params)
    t = state.step + 1
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for p in params:
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.value)
            state.second_moment[p.name] = np.zeros_like(p.value)
        v = state.second_moment[p.name]
        if weight_decay:
            p.value -= lr * weight_decay * p.value
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * np.square(p.grad)
        p.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + epsilon)
    state.step = t


class Optimizer:
    def __init__(self, params: Sequence[Parameter]):
        self.params: List[Parameter] = list(params)
        self.state = OptimizerState()

    def step(self, lr: float) -> None:
        raise NotImplementedError


class SGDMomentum(Optimizer):
    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, lr):
        sgd_momentum_step(self.params, self.state, lr, self.momentum, self.weight_decay)


class Adam(Optimizer):
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 0.01,
                 weight_decay: float = 0.0):
        super().__init__(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.weight_decay = weight_decay

    def step(self, lr):
        adam_step(self.params, self.state, lr, self.beta1, self.beta2, self.epsilon, self.weight_decay)


def build_optimizer(config: TrainConfig, params: Sequence[Parameter]) -> Optimizer:
    if config.optimizer == "sgd-momentum":
        return SGDMomentum(params, config.momentum, config.weight_decay)
    if config.optimizer == "adam":
        return Adam(params, config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.weight_decay)
    raise ConfigError(f"未知的优化器: {config.optimizer}")


def lr_at(epoch: float, config: TrainConfig) -> float:
    """
    预热阶段（epoch < warmup）：从 lr0/warmup 线性升到 lr0
    之后：constant 保持 lr0；cosine 为 lr0·0.5·(1 + cos(π·t))，t = (epoch - warmup)/(epochs - warmup)
    epoch 允许取到 epochs（训练结束点，t = 1）
    """
    if not 0 <= epoch <= config.epochs:
        raise DomainError(f"epoch={epoch} 超出范围 [0, {config.epochs}]")
    warmup = config.warmup_epochs
    if epoch < warmup:
        return config.lr0 * min(1.0, (epoch + 1) / warmup)
    if config.schedule == "constant":
        return config.lr0
    span = config.epochs - warmup
    t = (epoch - warmup) / span if span > 0 else 1.0
    return config.lr0 * 0.5 * (1.0 + math.cos(math.pi * t))
