"""
layers.py
带前向/反向传播的层：普通卷积、全连接、基本单元、堆叠层、残差块、池化、展平、softmax 输出，
以及交叉熵目标与顺序模型
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from arch_spec import LayerKind, Shape, UnitKind, UnitSpec
from errors import DomainError, ShapeMismatchError, StateError
from tensor_ops import (
    ConvGeometry, channel_concat, channel_split, conv2d, conv2d_backward, global_avg_pool,
    global_avg_pool_backward, grouped_matmul, grouped_matmul_backward, matmul, max_pool2d,
    max_pool2d_backward, relu, relu_backward, softmax,
)


@dataclass
class Parameter:
    """可训练参数；grad 在第一次 zero_grad 或反向传播前为 None"""
    name: str
    value: np.ndarray
    grad: Optional[np.ndarray] = None

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def accumulate(self, grad: np.ndarray):
        if grad.shape != self.value.shape:
            raise ShapeMismatchError(f"参数 {self.name} 梯度形状 {grad.shape} 与取值 {self.value.shape} 不一致")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += grad


def activate(x: np.ndarray, activation: str) -> np.ndarray:
    return relu(x) if activation == "relu" else x


def activate_backward(y: np.ndarray, grad: np.ndarray, activation: str) -> np.ndarray:
    return relu_backward(y, grad) if activation == "relu" else grad


class Layer:
    """层的统一约定：forward 缓存反向所需的中间量，backward 累加参数梯度并返回输入梯度"""
    kind: LayerKind = None

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: Shape) -> Shape:
        """单样本形状推导，用于构建期检查"""
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise StateError(f"层 {self.name} 在 forward 之前调用了 backward")
        return self._cache

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class Conv2dLayer(Layer):
    """普通（全连接）卷积层"""
    kind = LayerKind.NORMAL_CONV

    def __init__(self, name: str, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                 stride: int = 1, padding: int = 0, activation: str = "relu"):
        super().__init__(name)
        self.weight = Parameter(f"{name}.weight", weight)
        self.bias = Parameter(f"{name}.bias", bias) if bias is not None else None
        self.geom = ConvGeometry(weight.shape[2], stride, padding)
        self.activation = activation

    def parameters(self) -> List[Parameter]:
        return [self.weight] + ([self.bias] if self.bias else [])

    def forward(self, x):
        z = conv2d(x, self.weight.value, self.bias.value if self.bias else None, self.geom)
        y = activate(z, self.activation)
        self._cache = (x, y)
        return y

    def backward(self, grad_out):
        x, y = self._cached()
        g = activate_backward(y, grad_out, self.activation)
        grad_x, grad_w, grad_b = conv2d_backward(x, self.weight.value, g, self.geom, self.bias is not None)
        self.weight.accumulate(grad_w)
        if self.bias:
            self.bias.accumulate(grad_b)
        return grad_x

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.weight.value.shape[1]:
            raise ShapeMismatchError(
                f"层 {self.name} 期望输入通道 {self.weight.value.shape[1]}，实际输入形状 {input_shape}"
            )
        return (self.weight.value.shape[0],) + self.geom.output_size(*input_shape[1:])


class DenseLayer(Layer):
    """普通全连接层：y = act(x @ W + b)，W 形状 [n_in, n_out]"""
    kind = LayerKind.DENSE

    def __init__(self, name: str, weight: np.ndarray, bias: Optional[np.ndarray] = None, activation: str = "relu"):
        super().__init__(name)
        self.weight = Parameter(f"{name}.weight", weight)
        self.bias = Parameter(f"{name}.bias", bias) if bias is not None else None
        self.activation = activation

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias else [])

    def forward(self, x):
        z = matmul(x, self.weight.value)
        if self.bias:
            z = z + self.bias.value
        y = activate(z, self.activation)
        self._cache = (x, y)
        return y

    def backward(self, grad_out):
        x, y = self._cached()
        g = activate_backward(y, grad_out, self.activation)
        self.weight.accumulate(x.T @ g)
        if self.bias:
            self.bias.accumulate(g.sum(axis=0))
        return g @ self.weight.value.T

    def output_shape(self, input_shape):
        if len(input_shape) != 1 or input_shape[0] != self.weight.value.shape[0]:
            raise ShapeMismatchError(
                f"层 {self.name} 期望输入维度 {self.weight.value.shape[0]}，实际输入形状 {input_shape}"
            )
        return (self.weight.value.shape[1],)


def _unit_block_forward(x, w_l, b_l, w_r, b_r, spec: UnitSpec, groups: int,
                        hidden_activation: str, activation: str):
    """g 个相同单元作为一个分组卷积（或块对角矩阵乘）计算"""
    if spec.kind == UnitKind.CONV:
        h = activate(conv2d(x, w_l, b_l, spec.left_geometry(groups)), hidden_activation)
        y = activate(conv2d(h, w_r, b_r, spec.right_geometry(groups)), activation)
    else:
        z = grouped_matmul(x, w_l)
        h = activate(z + b_l if b_l is not None else z, hidden_activation)
        z = grouped_matmul(h, w_r)
        y = activate(z + b_r if b_r is not None else z, activation)
    return y, (x, h, y)


def _unit_block_backward(cache, grad_out, w_l, w_r, spec: UnitSpec, groups: int,
                         hidden_activation: str, activation: str, with_bias: bool):
    x, h, y = cache
    g = activate_backward(y, grad_out, activation)
    if spec.kind == UnitKind.CONV:
        grad_h, grad_w_r, grad_b_r = conv2d_backward(h, w_r, g, spec.right_geometry(groups), with_bias)
        g = activate_backward(h, grad_h, hidden_activation)
        grad_x, grad_w_l, grad_b_l = conv2d_backward(x, w_l, g, spec.left_geometry(groups), with_bias)
    else:
        grad_b_r = g.sum(axis=0) if with_bias else None
        grad_h, grad_w_r = grouped_matmul_backward(h, w_r, g)
        g = activate_backward(h, grad_h, hidden_activation)
        grad_b_l = g.sum(axis=0) if with_bias else None
        grad_x, grad_w_l = grouped_matmul_backward(x, w_l, g)
    return grad_x, grad_w_l, grad_b_l, grad_w_r, grad_b_r


class BasicUnit:
    """
    基本单元 {c_in', c_h, c_out'}：两层私有权重 W_l、W_r
    卷积单元 W_l 形状 [c_h, c_in', d, d]、W_r 形状 [c_out', c_h, d, d]；
    全连接单元 W_l 形状 [c_in', c_h]、W_r 形状 [c_h, c_out']
    """

    def __init__(self, name: str, spec: UnitSpec, w_l: np.ndarray, w_r: np.ndarray,
                 b_l: Optional[np.ndarray] = None, b_r: Optional[np.ndarray] = None,
                 hidden_activation: str = "relu", activation: str = "relu"):
        expected_l, expected_r = _unit_weight_shapes(spec)
        if w_l.shape != expected_l or w_r.shape != expected_r:
            raise ShapeMismatchError(
                f"单元 {name} 权重形状 {w_l.shape}/{w_r.shape} 与 {expected_l}/{expected_r} 不一致"
            )
        self.name = name
        self.spec = spec
        self.w_l = Parameter(f"{name}.w_l", w_l)
        self.w_r = Parameter(f"{name}.w_r", w_r)
        self.b_l = Parameter(f"{name}.b_l", b_l) if b_l is not None else None
        self.b_r = Parameter(f"{name}.b_r", b_r) if b_r is not None else None
        self.hidden_activation = hidden_activation
        self.activation = activation
        self._cache = None

    @property
    def has_bias(self) -> bool:
        return self.b_l is not None

    def parameters(self) -> List[Parameter]:
        params = [self.w_l, self.w_r]
        if self.has_bias:
            params = [self.w_l, self.b_l, self.w_r, self.b_r]
        return params

    def _group_weights(self):
        if self.spec.kind == UnitKind.DENSE:
            return self.w_l.value[None], self.w_r.value[None]
        return self.w_l.value, self.w_r.value

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.spec.c_in:
            raise ShapeMismatchError(f"单元 {self.name} 期望 {self.spec.c_in} 个输入通道，实际 {x.shape[1]}")
        w_l, w_r = self._group_weights()
        y, self._cache = _unit_block_forward(
            x, w_l, self.b_l.value if self.has_bias else None, w_r, self.b_r.value if self.has_bias else None,
            self.spec, 1, self.hidden_activation, self.activation,
        )
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError(f"单元 {self.name} 在 forward 之前调用了 backward")
        w_l, w_r = self._group_weights()
        grad_x, g_wl, g_bl, g_wr, g_br = _unit_block_backward(
            self._cache, grad_out, w_l, w_r, self.spec, 1, self.hidden_activation, self.activation, self.has_bias,
        )
        self.w_l.accumulate(g_wl.reshape(self.w_l.value.shape))
        self.w_r.accumulate(g_wr.reshape(self.w_r.value.shape))
        if self.has_bias:
            self.b_l.accumulate(g_bl)
            self.b_r.accumulate(g_br)
        return grad_x


def _unit_weight_shapes(spec: UnitSpec) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    if spec.kind == UnitKind.DENSE:
        return (spec.c_in, spec.c_h), (spec.c_h, spec.c_out)
    d = spec.kernel
    return (spec.c_h, spec.c_in, d, d), (spec.c_out, spec.c_h, d, d)


class StackedLayer(Layer):
    """
    堆叠层：输入按各单元 c_in' 连续切片，每片交给自己的单元，输出按顺序拼接
    相邻的相同单元合并成一段，用分组卷积一次算完；各单元参数互不共享
    """

    def __init__(self, name: str, units: Sequence[BasicUnit]):
        super().__init__(name)
        if not units:
            raise ShapeMismatchError(f"堆叠层 {name} 至少需要一个单元")
        self.units = list(units)
        self.kind = LayerKind.STACKED_DENSE if self.units[0].spec.kind == UnitKind.DENSE else LayerKind.STACKED_CONV
        self.runs: List[List[BasicUnit]] = []
        for unit in self.units:
            last = self.runs[-1][0] if self.runs else None
            if last is not None and last.spec == unit.spec and last.has_bias == unit.has_bias \
                    and (last.hidden_activation, last.activation) == (unit.hidden_activation, unit.activation):
                self.runs[-1].append(unit)
            else:
                self.runs.append([unit])

    @property
    def m(self) -> int:
        return len(self.units)

    @property
    def input_sizes(self) -> List[int]:
        return [u.spec.c_in for u in self.units]

    @property
    def output_sizes(self) -> List[int]:
        return [u.spec.c_out for u in self.units]

    def parameters(self):
        return [p for unit in self.units for p in unit.parameters()]

    def _run_weights(self, run: List[BasicUnit]):
        head = run[0]
        if head.spec.kind == UnitKind.DENSE:
            w_l = np.stack([u.w_l.value for u in run])
            w_r = np.stack([u.w_r.value for u in run])
        else:
            w_l = np.concatenate([u.w_l.value for u in run], axis=0) if len(run) > 1 else head.w_l.value
            w_r = np.concatenate([u.w_r.value for u in run], axis=0) if len(run) > 1 else head.w_r.value
        if not head.has_bias:
            return w_l, None, w_r, None
        b_l = np.concatenate([u.b_l.value for u in run])
        b_r = np.concatenate([u.b_r.value for u in run])
        return w_l, b_l, w_r, b_r

    def forward(self, x):
        sizes = [run[0].spec.c_in * len(run) for run in self.runs]
        if x.shape[1] != sum(sizes):
            raise ShapeMismatchError(f"堆叠层 {self.name} 期望 {sum(sizes)} 个输入通道，实际 {x.shape[1]}")
        outputs, caches = [], []
        for run, piece in zip(self.runs, channel_split(x, sizes)):
            w_l, b_l, w_r, b_r = self._run_weights(run)
            head = run[0]
            y, cache = _unit_block_forward(piece, w_l, b_l, w_r, b_r, head.spec, len(run),
                                           head.hidden_activation, head.activation)
            outputs.append(y)
            caches.append(cache)
        self._cache = caches
        return channel_concat(outputs)

    def feature_maps(self) -> List[Tuple[List[BasicUnit], np.ndarray, np.ndarray]]:
        """最近一次 forward 中每段的 (单元列表, 隐藏特征图, 输出特征图)"""
        return [(run, h, y) for run, (_, h, y) in zip(self.runs, self._cached())]

    def backward(self, grad_out):
        caches = self._cached()
        sizes = [run[0].spec.c_out * len(run) for run in self.runs]
        grads = []
        for run, cache, piece in zip(self.runs, caches, channel_split(grad_out, sizes)):
            head = run[0]
            w_l, _, w_r, _ = self._run_weights(run)
            grad_x, g_wl, g_bl, g_wr, g_br = _unit_block_backward(
                cache, piece, w_l, w_r, head.spec, len(run), head.hidden_activation, head.activation, head.has_bias,
            )
            g = len(run)
            if head.spec.kind == UnitKind.DENSE:
                wl_parts, wr_parts = list(g_wl), list(g_wr)
            else:
                wl_parts, wr_parts = np.split(g_wl, g, axis=0), np.split(g_wr, g, axis=0)
            bl_parts = np.split(g_bl, g) if head.has_bias else [None] * g
            br_parts = np.split(g_br, g) if head.has_bias else [None] * g
            for unit, gwl, gbl, gwr, gbr in zip(run, wl_parts, bl_parts, wr_parts, br_parts):
                unit.w_l.accumulate(gwl)
                unit.w_r.accumulate(gwr)
                if unit.has_bias:
                    unit.b_l.accumulate(gbl)
                    unit.b_r.accumulate(gbr)
            grads.append(grad_x)
        return channel_concat(grads)

    def output_shape(self, input_shape):
        if input_shape[0] != sum(self.input_sizes):
            raise ShapeMismatchError(
                f"堆叠层 {self.name} 期望 {sum(self.input_sizes)} 个输入通道，实际输入形状 {input_shape}"
            )
        out_channels = sum(self.output_sizes)
        spec = self.units[0].spec
        if spec.kind == UnitKind.DENSE:
            if len(input_shape) != 1:
                raise ShapeMismatchError(f"堆叠全连接层 {self.name} 需要一维输入，实际 {input_shape}")
            return (out_channels,)
        if len(input_shape) != 3:
            raise ShapeMismatchError(f"堆叠卷积层 {self.name} 需要 [C,H,W] 输入，实际 {input_shape}")
        h, w = spec.left_geometry().output_size(*input_shape[1:])
        return (out_channels,) + spec.right_geometry().output_size(h, w)


class ResidualBlock(Layer):
    """残差块：act(main(x) + shortcut(x))，shortcut 为 None 时是恒等映射"""
    kind = LayerKind.RESIDUAL_BLOCK

    def __init__(self, name: str, main: Sequence[Layer], shortcut: Optional[Layer] = None,
                 activation: str = "relu"):
        super().__init__(name)
        self.main = list(main)
        self.shortcut = shortcut
        self.activation = activation

    def parameters(self):
        params = [p for layer in self.main for p in layer.parameters()]
        if self.shortcut:
            params += self.shortcut.parameters()
        return params

    def forward(self, x):
        h = x
        for layer in self.main:
            h = layer.forward(h)
        s = self.shortcut.forward(x) if self.shortcut else x
        if h.shape != s.shape:
            raise ShapeMismatchError(f"残差块 {self.name} 主路径 {h.shape} 与捷径 {s.shape} 形状不一致")
        y = activate(h + s, self.activation)
        self._cache = y
        return y

    def backward(self, grad_out):
        y = self._cached()
        g = activate_backward(y, grad_out, self.activation)
        grad_main = g
        for layer in reversed(self.main):
            grad_main = layer.backward(grad_main)
        grad_short = self.shortcut.backward(g) if self.shortcut else g
        return grad_main + grad_short

    def output_shape(self, input_shape):
        main_shape = input_shape
        for layer in self.main:
            main_shape = layer.output_shape(main_shape)
        short_shape = self.shortcut.output_shape(input_shape) if self.shortcut else input_shape
        if tuple(main_shape) != tuple(short_shape):
            raise ShapeMismatchError(f"残差块 {self.name} 主路径输出 {main_shape} 与捷径输出 {short_shape} 不一致")
        return tuple(main_shape)


class MaxPoolLayer(Layer):
    kind = LayerKind.POOL

    def __init__(self, name: str, window: int, stride: Optional[int] = None, padding: int = 0):
        super().__init__(name)
        self.window = window
        self.stride = stride or window
        self.padding = padding

    def forward(self, x):
        y, argmax = max_pool2d(x, self.window, self.stride, self.padding)
        self._cache = (x.shape, argmax)
        return y

    def backward(self, grad_out):
        shape, argmax = self._cached()
        return max_pool2d_backward(grad_out, argmax, shape, self.window, self.stride, self.padding)

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeMismatchError(f"池化层 {self.name} 需要 [C,H,W] 输入，实际 {input_shape}")
        geom = ConvGeometry(self.window, self.stride, self.padding)
        return (input_shape[0],) + geom.output_size(*input_shape[1:])


class GlobalAvgPoolLayer(Layer):
    kind = LayerKind.GLOBAL_AVG_POOL

    def forward(self, x):
        self._cache = x.shape
        return global_avg_pool(x)

    def backward(self, grad_out):
        return global_avg_pool_backward(grad_out, self._cached())

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeMismatchError(f"全局平均池化 {self.name} 需要 [C,H,W] 输入，实际 {input_shape}")
        return (input_shape[0],)


class FlattenLayer(Layer):
    kind = LayerKind.FLATTEN

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._cached())

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class SoftmaxLayer(Layer):
    """推理用的概率输出层；训练时交叉熵直接作用在 logits 上"""
    kind = LayerKind.SOFTMAX_OUTPUT

    def forward(self, x):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, grad_out):
        p = self._cached()
        return p * (grad_out - (grad_out * p).sum(axis=1, keepdims=True))

    def output_shape(self, input_shape):
        return tuple(input_shape)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """返回 (batch 平均交叉熵, 对 logits 的梯度 (softmax - onehot)/N)"""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(f"标签形状 {labels.shape} 与 batch 大小 {n} 不一致")
    if n == 0:
        raise DomainError("交叉熵需要非空 batch")
    if labels.min() < 0 or labels.max() >= k:
        raise DomainError(f"标签超出范围 [0, {k})：min={labels.min()}, max={labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


class Model:
    """顺序模型；构建时做静态形状检查，运行期不再检查层间形状"""

    def __init__(self, layers: Sequence[Layer], input_shape: Optional[Shape] = None, name: str = "model"):
        self.layers = list(layers)
        self.name = name
        self.input_shape = tuple(input_shape) if input_shape else None
        if self.input_shape:
            shape = self.input_shape
            for layer in self.layers:
                try:
                    shape = layer.output_shape(shape)
                except ShapeMismatchError as e:
                    raise e.add_context(f"模型 {name} 的层 {layer.name}")
            self.output_shape = tuple(shape)
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ShapeMismatchError(f"模型 {name} 中存在重名参数")

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def locate_non_finite(self, x: np.ndarray) -> Optional[str]:
        """逐层前向，返回第一个产生 NaN/Inf 输出的层名"""
        if not np.all(np.isfinite(x)):
            return "input"
        for layer in self.layers:
            x = layer.forward(x)
            if not np.all(np.isfinite(x)):
                return layer.name
        return None

    def predict_logits(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        outputs = [self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        return np.concatenate(outputs, axis=0)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def load_state_dict(self, values: Dict[str, np.ndarray]):
        for p in self.parameters():
            if p.name not in values:
                raise StateError(f"检查点缺少参数 {p.name}")
            if values[p.name].shape != p.value.shape:
                raise ShapeMismatchError(f"参数 {p.name} 形状 {values[p.name].shape} 与模型 {p.value.shape} 不一致")
            p.value = np.array(values[p.name], dtype=p.value.dtype)


# 与层方法等价的函数式入口
def unit_forward(unit: BasicUnit, x: np.ndarray) -> np.ndarray:
    return unit.forward(x)


def stacked_forward(layer: StackedLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def residual_forward(block: ResidualBlock, x: np.ndarray) -> np.ndarray:
    return block.forward(x)


def layer_backward(layer: Layer, grad_out: np.ndarray) -> np.ndarray:
    return layer.backward(grad_out)


def model_forward(model: Model, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def model_backward(model: Model, grad: np.ndarray) -> None:
    model.backward(grad)
