"""最小的全连接网络引擎：前向记录带、精确反向传播、Adam 和数值雅可比

所有计算使用 64 位浮点数。前向输入既可以是单个向量 ``(in,)``，也可以是
批量矩阵 ``(n, in)``；反向传播得到的参数梯度是对整个批量求和的结果。
"""

import itertools
import logging
from enum import Enum
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from latent_response.error_handler import DataError, ModelError, NumericalError, UsageError

# 配置日志
logger = logging.getLogger(__name__)

_NET_IDS = itertools.count(1)

DEFAULT_FD_STEP = 1e-4


class Activation(str, Enum):
    """逐元素激活函数"""
    ELU = "elu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


def elu(x):
    """ELU 激活（α = 1）：x > 0 时为 x，否则为 exp(x) − 1"""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def _activate(activation: Activation, pre: np.ndarray) -> np.ndarray:
    if activation is Activation.ELU:
        return np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0.0)))
    if activation is Activation.SIGMOID:
        return expit(pre)
    return pre


def _activation_grad(activation: Activation, pre: np.ndarray) -> np.ndarray:
    if activation is Activation.ELU:
        return np.where(pre > 0, 1.0, np.exp(np.minimum(pre, 0.0)))
    if activation is Activation.SIGMOID:
        s = expit(pre)
        return s * (1.0 - s)
    return np.ones_like(pre)


class DenseLayer:
    """仿射变换加逐元素激活：y = act(W x + b)"""

    def __init__(self, weight, bias, activation: Activation = Activation.IDENTITY):
        weight = np.array(weight, dtype=np.float64, ndmin=2)
        bias = np.array(bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != weight.shape[0]:
            raise ModelError(f"偏置长度 {bias.shape[0]} 与权重行数 {weight.shape[0]} 不一致")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ModelError("层参数包含非有限值")
        self.weight = weight
        self.bias = bias
        self.activation = Activation(activation)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


class Mlp:
    """按顺序排列的全连接层"""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ModelError("网络至少需要一层")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise ModelError(
                    f"第 {k} 层输出维度 {layers[k].out_dim} 与第 {k + 1} 层输入维度 {layers[k + 1].in_dim} 不匹配"
                )
        self.layers = layers
        self.net_id = next(_NET_IDS)
        self.version = 0

    @classmethod
    def initialize(cls, sizes: Sequence[int], rng: np.random.Generator,
                   hidden_activation: Activation = Activation.ELU,
                   output_activation: Activation = Activation.IDENTITY) -> "Mlp":
        """Glorot 均匀初始化：权重 ~ U(±√(6/(fan_in+fan_out)))，偏置为 0

        Args:
            sizes: 各层宽度，包括输入和输出，例如 [3, 32, 32, 4]
            rng: 随机数生成器
            hidden_activation: 隐藏层激活
            output_activation: 输出层激活
        """
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise UsageError(f"无效的网络宽度: {list(sizes)}")
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            activation = output_activation if k == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer(weight, np.zeros(fan_out), activation))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> List[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> List[np.ndarray]:
        """参数数组引用，顺序为 [W0, b0, W1, b1, ...]"""
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def mark_updated(self) -> None:
        """参数被原地修改后调用，使旧的记录带失效"""
        self.version += 1

    def copy(self) -> "Mlp":
        return Mlp([layer.copy() for layer in self.layers])

    def same_weights(self, other: "Mlp") -> bool:
        """逐位比较两个网络的结构和参数"""
        if self.sizes != other.sizes:
            return False
        for a, b in zip(self.layers, other.layers):
            if a.activation != b.activation:
                return False
            if not (np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)):
                return False
        return True


class Tape:
    """前向传播记录带，保存每层的输入和激活前的值"""

    __slots__ = ("net_id", "version", "inputs", "pre", "single")

    def __init__(self, net: Mlp, single: bool):
        self.net_id = net.net_id
        self.version = net.version
        self.inputs: List[np.ndarray] = []
        self.pre: List[np.ndarray] = []
        self.single = single


class Gradients(NamedTuple):
    """反向传播结果"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray

    def as_list(self) -> List[np.ndarray]:
        """与 Mlp.parameters() 对齐的梯度列表"""
        grads = []
        for dw, db in zip(self.weights, self.biases):
            grads.extend([dw, db])
        return grads


def _as_batch(x, dim: int, what: str) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x.reshape(1, -1) if single else x
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise DataError(f"{what}维度不匹配: 期望 {dim}，实际 {x.shape}")
    return batch, single


def forward(net: Mlp, x) -> Tuple[np.ndarray, Tape]:
    """前向传播

    Args:
        net: 网络
        x: 输入向量 (in,) 或批量 (n, in)

    Returns:
        (输出, 记录带)，输出形状与输入的批量形式一致
    """
    batch, single = _as_batch(x, net.in_dim, "网络输入")
    tape = Tape(net, single)
    h = batch
    for layer in net.layers:
        tape.inputs.append(h)
        pre = h @ layer.weight.T + layer.bias
        tape.pre.append(pre)
        h = _activate(layer.activation, pre)
    return (h[0] if single else h), tape


def predict(net: Mlp, x) -> np.ndarray:
    """只求输出的前向传播"""
    return forward(net, x)[0]


def backward(net: Mlp, tape: Tape, grad_output) -> Gradients:
    """反向传播

    Args:
        net: 产生记录带的网络
        tape: forward 返回的记录带
        grad_output: 标量损失对输出的梯度，形状与前向输出相同

    Returns:
        各层权重、偏置的梯度（对批量求和）以及对输入的梯度
    """
    if tape.net_id != net.net_id or tape.version != net.version:
        raise ModelError("记录带与网络不匹配或已过期，请重新执行前向传播")

    grad = np.asarray(grad_output, dtype=np.float64)
    grad = grad.reshape(1, -1) if tape.single else grad
    expected = tape.pre[-1].shape
    if grad.shape != expected:
        raise DataError(f"输出梯度维度不匹配: 期望 {expected}，实际 {grad.shape}")

    weights: List[Optional[np.ndarray]] = [None] * len(net.layers)
    biases: List[Optional[np.ndarray]] = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        dpre = grad * _activation_grad(layer.activation, tape.pre[k])
        weights[k] = dpre.T @ tape.inputs[k]
        biases[k] = dpre.sum(axis=0)
        grad = dpre @ layer.weight

    return Gradients(weights, biases, grad[0] if tape.single else grad)


class AdamState:
    """Adam 优化器状态"""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise UsageError(f"学习率必须为正: {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise UsageError(f"beta1、beta2 必须位于 [0, 1): {beta1}, {beta2}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p, dtype=np.float64) for p in params]


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> Tuple[Sequence[np.ndarray], AdamState]:
    """执行一步带偏差修正的 Adam 更新（原地修改参数和状态）

    Raises:
        NumericalError: 梯度包含非有限值
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DataError(f"参数数量 {len(params)}、梯度数量 {len(grads)}、状态数量 {len(state.m)} 不一致")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g):
            raise DataError(f"第 {k} 个参数形状 {p.shape} 与梯度形状 {np.shape(g)} 不一致")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"第 {k} 个参数的梯度包含非有限值，训练终止", {"parameter": k, "step": state.step + 1})

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / correction1
        v_hat = v / correction2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def numerical_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """中心差分雅可比：J[i, j] = (f_i(x + h e_j) − f_i(x − h e_j)) / (2h)

    Raises:
        NumericalError: 某一列的函数值不是有限数
    """
    if h <= 0:
        raise UsageError(f"差分步长必须为正: {h}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    columns = []
    for j in range(x.shape[0]):
        step = np.zeros_like(x)
        step[j] = h
        plus = np.asarray(f(x + step), dtype=np.float64).reshape(-1)
        minus = np.asarray(f(x - step), dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
            raise NumericalError(f"雅可比第 {j} 列的函数值不是有限数", {"column": j})
        columns.append((plus - minus) / (2.0 * h))
    if not columns:
        return np.zeros((np.asarray(f(x)).reshape(-1).shape[0], 0))
    return np.stack(columns, axis=1)
