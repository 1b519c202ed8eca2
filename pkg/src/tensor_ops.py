"""
tensor_ops.py
数值内核：矩阵乘、分组二维卷积（直接实现 + im2col 快速路径）、池化、激活与通道切分/拼接
所有函数都是输入的纯函数，张量统一使用 numpy.ndarray（NCHW 布局）
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import GeometryError, PartitionError, ShapeMismatchError


@dataclass(frozen=True)
class ConvGeometry:
    """卷积几何参数：方形卷积核 d、步长、填充、分组数"""
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel < 1:
            raise GeometryError(f"卷积核尺寸必须为正整数: kernel={self.kernel}")
        if self.stride < 1:
            raise GeometryError(f"步长必须为正整数: stride={self.stride}")
        if self.padding < 0:
            raise GeometryError(f"填充不能为负: padding={self.padding}")
        if self.groups < 1:
            raise GeometryError(f"分组数必须为正整数: groups={self.groups}")

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        """H_out = floor((H + 2p - d) / s) + 1，小于 1 时报几何错误"""
        padded_h = height + 2 * self.padding
        padded_w = width + 2 * self.padding
        if padded_h < self.kernel or padded_w < self.kernel:
            raise GeometryError(
                f"卷积核 {self.kernel} 大于填充后的输入 {padded_h}x{padded_w}"
            )
        return (padded_h - self.kernel) // self.stride + 1, (padded_w - self.kernel) // self.stride + 1

    def with_groups(self, groups: int) -> "ConvGeometry":
        return ConvGeometry(self.kernel, self.stride, self.padding, groups)


def _pad_spatial(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _check_conv_shapes(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray], geom: ConvGeometry):
    if x.ndim != 4:
        raise ShapeMismatchError(f"卷积输入必须是 4 维 [N,C,H,W]，实际维度 {x.ndim}")
    if weight.ndim != 4:
        raise ShapeMismatchError(f"卷积权重必须是 4 维 [C_out,C_in/g,d,d]，实际维度 {weight.ndim}")
    c_in, c_out, g = x.shape[1], weight.shape[0], geom.groups
    if weight.shape[2] != geom.kernel or weight.shape[3] != geom.kernel:
        raise ShapeMismatchError(f"权重空间尺寸 {weight.shape[2:]} 与 kernel={geom.kernel} 不一致")
    if c_in % g != 0:
        raise ShapeMismatchError(f"输入通道 C_in={c_in} 不能被 groups={g} 整除")
    if c_out % g != 0:
        raise ShapeMismatchError(f"输出通道 C_out={c_out} 不能被 groups={g} 整除")
    if weight.shape[1] != c_in // g:
        raise ShapeMismatchError(f"权重输入通道 {weight.shape[1]} 与 C_in/g={c_in // g} 不一致")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatchError(f"偏置形状 {bias.shape} 与 C_out={c_out} 不一致")


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray], geom: ConvGeometry) -> np.ndarray:
    """参考实现：按 (输出通道, 输入通道, 核位置) 的循环嵌套做互相关，累加顺序固定"""
    _check_conv_shapes(x, weight, bias, geom)
    n, c_in, h, w = x.shape
    c_out = weight.shape[0]
    h_out, w_out = geom.output_size(h, w)
    d, s, g = geom.kernel, geom.stride, geom.groups
    cg, og = c_in // g, c_out // g
    xp = _pad_spatial(x, geom.padding)
    out = np.zeros((n, c_out, h_out, w_out), dtype=np.result_type(x, weight))
    for o in range(c_out):
        base = (o // og) * cg
        for c in range(cg):
            for i in range(d):
                for j in range(d):
                    window = xp[:, base + c, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s]
                    out[:, o] += weight[o, c, i, j] * window
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def im2col(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """展开为 [g, N*H_out*W_out, (C_in/g)*d*d] 的列矩阵"""
    n, c_in, h, w = x.shape
    h_out, w_out = geom.output_size(h, w)
    d, s, g = geom.kernel, geom.stride, geom.groups
    xp = _pad_spatial(x, geom.padding)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (d, d), axis=(2, 3))
    windows = windows[:, :, ::s, ::s][:, :, :h_out, :w_out]
    windows = windows.reshape(n, g, c_in // g, h_out, w_out, d, d)
    cols = windows.transpose(1, 0, 3, 4, 2, 5, 6)
    return cols.reshape(g, n * h_out * w_out, (c_in // g) * d * d)


def col2im(cols: np.ndarray, input_shape: Tuple[int, int, int, int], geom: ConvGeometry) -> np.ndarray:
    """im2col 的伴随：把列梯度按核位置累加回输入（顺序固定）"""
    n, c_in, h, w = input_shape
    h_out, w_out = geom.output_size(h, w)
    d, s, g, p = geom.kernel, geom.stride, geom.groups, geom.padding
    patches = cols.reshape(g, n, h_out, w_out, c_in // g, d, d)
    patches = patches.transpose(1, 0, 4, 2, 3, 5, 6).reshape(n, c_in, h_out, w_out, d, d)
    grad = np.zeros((n, c_in, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(d):
        for j in range(d):
            grad[:, :, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s] += patches[..., i, j]
    if p:
        grad = grad[:, :, p:p + h, p:p + w]
    return grad


def _weight_matrix(weight: np.ndarray, groups: int) -> np.ndarray:
    c_out = weight.shape[0]
    return weight.reshape(groups, c_out // groups, -1).transpose(0, 2, 1)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray], geom: ConvGeometry,
           method: str = "im2col") -> np.ndarray:
    """
    分组二维互相关
    第 k 组读取输入通道 [k*C_in/g, (k+1)*C_in/g)，写出输出通道 [k*C_out/g, (k+1)*C_out/g)
    :param method: "im2col"（默认快速路径）或 "direct"（参考实现）
    """
    if method == "direct":
        return conv2d_direct(x, weight, bias, geom)
    _check_conv_shapes(x, weight, bias, geom)
    n, _, h, w = x.shape
    c_out = weight.shape[0]
    h_out, w_out = geom.output_size(h, w)
    g = geom.groups
    out = np.matmul(im2col(x, geom), _weight_matrix(weight, g))
    out = out.reshape(g, n, h_out, w_out, c_out // g).transpose(1, 0, 4, 2, 3).reshape(n, c_out, h_out, w_out)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, geom: ConvGeometry,
                    with_bias: bool = True) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """返回 (grad_input, grad_weight, grad_bias)"""
    n, _, h, w = x.shape
    c_out = weight.shape[0]
    g = geom.groups
    h_out, w_out = geom.output_size(h, w)
    if grad_out.shape != (n, c_out, h_out, w_out):
        raise ShapeMismatchError(f"上游梯度形状 {grad_out.shape} 与卷积输出 {(n, c_out, h_out, w_out)} 不一致")
    cols = im2col(x, geom)
    grad_mat = grad_out.reshape(n, g, c_out // g, h_out, w_out).transpose(1, 0, 3, 4, 2)
    grad_mat = grad_mat.reshape(g, n * h_out * w_out, c_out // g)
    w_mat = _weight_matrix(weight, g)
    grad_weight = np.matmul(cols.transpose(0, 2, 1), grad_mat).transpose(0, 2, 1).reshape(weight.shape)
    grad_cols = np.matmul(grad_mat, w_mat.transpose(0, 2, 1))
    grad_input = col2im(grad_cols, x.shape, geom)
    grad_bias = grad_out.sum(axis=(0, 2, 3)) if with_bias else None
    return grad_input, grad_weight, grad_bias


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul 只接受二维矩阵，实际为 {a.ndim} 维与 {b.ndim} 维")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"矩阵内维不一致: {a.shape} x {b.shape}")
    return a @ b


def grouped_matmul(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """块对角矩阵乘：x [N, g*a]，weight [g, a, b] -> [N, g*b]"""
    g, a, b = weight.shape
    if x.ndim != 2 or x.shape[1] != g * a:
        raise ShapeMismatchError(f"分组矩阵乘输入 {x.shape} 与权重 {weight.shape} 不一致")
    n = x.shape[0]
    out = np.matmul(x.reshape(n, g, a).transpose(1, 0, 2), weight)
    return out.transpose(1, 0, 2).reshape(n, g * b)


def grouped_matmul_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    g, a, b = weight.shape
    n = x.shape[0]
    xg = x.reshape(n, g, a).transpose(1, 0, 2)
    gg = grad_out.reshape(n, g, b).transpose(1, 0, 2)
    grad_weight = np.matmul(xg.transpose(0, 2, 1), gg)
    grad_input = np.matmul(gg, weight.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(n, g * a)
    return grad_input, grad_weight


def channel_split(x: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    """沿通道维（axis=1）按连续区间切分"""
    if any(s <= 0 for s in sizes):
        raise PartitionError(x.shape[1], 0, f"切分尺寸必须为正整数: {list(sizes)}")
    if sum(sizes) != x.shape[1]:
        raise PartitionError(x.shape[1], 0, f"切分尺寸之和 {sum(sizes)} 不等于通道数 {x.shape[1]}")
    return np.split(x, np.cumsum(sizes)[:-1], axis=1)


def channel_concat(pieces: Sequence[np.ndarray]) -> np.ndarray:
    if not pieces:
        raise ShapeMismatchError("channel_concat 至少需要一个输入")
    ref = pieces[0]
    for k, piece in enumerate(pieces):
        if piece.ndim != ref.ndim or piece.shape[0] != ref.shape[0] or piece.shape[2:] != ref.shape[2:]:
            raise ShapeMismatchError(f"第 {k} 块形状 {piece.shape} 与第 0 块 {ref.shape} 的非通道维不一致")
    if len(pieces) == 1:
        return ref
    return np.concatenate(pieces, axis=1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """y 为 relu 的输出"""
    return grad_out * (y > 0)


def max_pool2d(x: np.ndarray, window: int, stride: Optional[int] = None,
               padding: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (输出, 窗口内 argmax 下标)，填充位置视为 -inf"""
    geom = ConvGeometry(window, stride or window, padding)
    if padding * 2 > window:
        raise GeometryError(f"池化填充 {padding} 超过窗口的一半 {window}")
    n, c, h, w = x.shape
    h_out, w_out = geom.output_size(h, w)
    xp = _pad_spatial(x, padding, value=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(2, 3))
    windows = windows[:, :, ::geom.stride, ::geom.stride][:, :, :h_out, :w_out]
    flat = windows.reshape(n, c, h_out, w_out, window * window)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def max_pool2d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape: Tuple[int, int, int, int],
                        window: int, stride: Optional[int] = None, padding: int = 0) -> np.ndarray:
    s = stride or window
    n, c, h, w = input_shape
    h_out, w_out = grad_out.shape[2:]
    grad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for i in range(window):
        for j in range(window):
            mask = argmax == i * window + j
            grad[:, :, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s] += grad_out * mask
    if padding:
        grad = grad[:, :, padding:padding + h, padding:padding + w]
    return grad


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeMismatchError(f"全局平均池化需要 4 维输入，实际 {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: np.ndarray, input_shape: Tuple[int, int, int, int]) -> np.ndarray:
    h, w = input_shape[2:]
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), input_shape).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    """按行 softmax（减去行最大值保证数值稳定）"""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)
