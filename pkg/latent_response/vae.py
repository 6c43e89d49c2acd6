"""高斯 VAE：编码器均值/对数标准差头、确定性解码器、β 加权 ELBO 与训练循环

模型内部保存观测标准化参数（shift/scale），encode/decode 的输入输出都使用
原始数据单位；重构误差在标准化空间中计算。
"""

import json
import logging
import os
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app import __version__
from app.models.checkpoint import Checkpoint, LayerRecord, NetworkRecord
from app.models.config import TrainConfig
from app.utils.rng import STREAM_INIT, STREAM_TRAIN, make_rng
from latent_response.data import Dataset, Standardizer
from latent_response.error_handler import DataError, ModelError, NumericalError, TrainingDivergedError
from latent_response.nn_core import (
    Activation,
    AdamState,
    DenseLayer,
    Mlp,
    adam_step,
    backward,
    forward,
    predict,
)

# 配置日志
logger = logging.getLogger(__name__)

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 3.0


class Posterior(NamedTuple):
    """q(Z|x) = N(mu, exp(log_sigma)²)"""
    mu: np.ndarray
    log_sigma: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


class VaeModel:
    """编码器 (D → 2d)、解码器 (d → D)、潜变量维度 d 和 β；先验为 N(0, I_d)"""

    def __init__(self, encoder: Mlp, decoder: Mlp, latent_dim: int, beta: float = 1.0,
                 standardizer: Optional[Standardizer] = None, seed: int = 0):
        if encoder.out_dim != 2 * latent_dim:
            raise ModelError(f"编码器输出维度 {encoder.out_dim} 必须为 2 × {latent_dim}")
        if decoder.in_dim != latent_dim:
            raise ModelError(f"解码器输入维度 {decoder.in_dim} 必须为 {latent_dim}")
        if decoder.out_dim != encoder.in_dim:
            raise ModelError(f"解码器输出维度 {decoder.out_dim} 与编码器输入维度 {encoder.in_dim} 不一致")
        if beta < 0:
            raise ModelError(f"β 不能为负: {beta}")
        self.encoder = encoder
        self.decoder = decoder
        self.latent_dim = int(latent_dim)
        self.beta = float(beta)
        self.standardizer = standardizer or Standardizer.identity(encoder.in_dim)
        self.seed = int(seed)
        if self.standardizer.shift.shape != (self.obs_dim,):
            raise ModelError("标准化参数维度与观测维度不一致")

    @property
    def obs_dim(self) -> int:
        return self.encoder.in_dim

    def parameters(self) -> List[np.ndarray]:
        return self.encoder.parameters() + self.decoder.parameters()

    def mark_updated(self) -> None:
        self.encoder.mark_updated()
        self.decoder.mark_updated()

    def copy(self) -> "VaeModel":
        return VaeModel(self.encoder.copy(), self.decoder.copy(), self.latent_dim, self.beta,
                        Standardizer(self.standardizer.shift.copy(), self.standardizer.scale.copy()),
                        self.seed)

    def same_weights(self, other: "VaeModel") -> bool:
        return (self.encoder.same_weights(other.encoder)
                and self.decoder.same_weights(other.decoder)
                and np.array_equal(self.standardizer.shift, other.standardizer.shift)
                and np.array_equal(self.standardizer.scale, other.standardizer.scale))


def create_model(obs_dim: int, config: TrainConfig, standardizer: Optional[Standardizer] = None) -> VaeModel:
    """按配置初始化模型：ELU 隐藏层、恒等输出层，初始化随机性来自 init 子流"""
    rng = make_rng(config.seed, STREAM_INIT)
    d = config.latent_dim
    encoder = Mlp.initialize([obs_dim] + list(config.hidden) + [2 * d], rng)
    decoder = Mlp.initialize([d] + list(config.hidden) + [obs_dim], rng)
    return VaeModel(encoder, decoder, d, config.beta, standardizer, config.seed)


def _check_dim(x, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != dim:
        raise DataError(f"{what}维度不匹配: 期望 {dim}，实际 {x.shape}")
    return x


def encode(model: VaeModel, x) -> Posterior:
    """编码：mu 为编码器前 d 个输出，log_sigma 为后 d 个输出（截断到 [−6, 3]）"""
    x = _check_dim(x, model.obs_dim, "观测")
    out = predict(model.encoder, model.standardizer.transform(x))
    d = model.latent_dim
    return Posterior(out[..., :d], np.clip(out[..., d:], LOG_SIGMA_MIN, LOG_SIGMA_MAX))


def encoder_mean(model: VaeModel, x) -> np.ndarray:
    return encode(model, x).mu


def decode(model: VaeModel, z) -> np.ndarray:
    """解码器均值 g(z)（确定性）"""
    z = _check_dim(z, model.latent_dim, "潜变量")
    return model.standardizer.inverse(predict(model.decoder, z))


def reparameterize(post: Posterior, noise) -> np.ndarray:
    """z = mu + exp(log_sigma) ⊙ noise，即 Z = S + U"""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != np.shape(post.mu):
        raise DataError(f"噪声形状 {noise.shape} 与后验形状 {np.shape(post.mu)} 不一致")
    return post.mu + post.sigma * noise


def kl_divergence(mu, log_sigma) -> np.ndarray:
    """KL(N(mu, σ²) ‖ N(0, I)) = ½ Σ (mu² + σ² − 1 − 2 log σ)"""
    mu = np.asarray(mu, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    return 0.5 * np.sum(mu * mu + np.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma, axis=-1)


def elbo_loss(model: VaeModel, batch, rng: Optional[np.random.Generator] = None,
              noise: Optional[np.ndarray] = None) -> Tuple[float, List[np.ndarray]]:
    """β 加权的负 ELBO 及其对全部参数的精确梯度

    loss = mean_i [ ½‖x_i − x̂_i‖² + β · KL(q(Z|x_i) ‖ N(0, I)) ]（标准化空间）

    Args:
        model: 模型
        batch: 原始单位的观测批量 (n, D)
        rng: 重参数化噪声的生成器
        noise: 直接给定的标准正态噪声 (n, d)，优先于 rng

    Returns:
        (损失, 与 model.parameters() 对齐的梯度列表)

    Raises:
        NumericalError: 损失不是有限数
    """
    x = np.atleast_2d(_check_dim(batch, model.obs_dim, "观测"))
    n = x.shape[0]
    if n == 0:
        raise DataError("批量不能为空")
    d = model.latent_dim
    if noise is None:
        if rng is None:
            raise DataError("需要提供 rng 或 noise")
        noise = rng.standard_normal((n, d))
    noise = np.asarray(noise, dtype=np.float64).reshape(n, d)

    x = model.standardizer.transform(x)
    enc_out, enc_tape = forward(model.encoder, x)
    mu = enc_out[:, :d]
    raw_log_sigma = enc_out[:, d:]
    log_sigma = np.clip(raw_log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    sigma = np.exp(log_sigma)
    z = mu + sigma * noise

    x_hat, dec_tape = forward(model.decoder, z)
    diff = x_hat - x
    reconstruction = 0.5 * np.sum(diff * diff, axis=1)
    kl = kl_divergence(mu, log_sigma)
    loss = float(np.mean(reconstruction + model.beta * kl))
    if not np.isfinite(loss):
        raise NumericalError(f"损失不是有限数: {loss}")

    dec_grads = backward(model.decoder, dec_tape, diff / n)
    dz = dec_grads.inputs
    d_mu = dz + model.beta * mu / n
    d_log_sigma = dz * noise * sigma + model.beta * (sigma * sigma - 1.0) / n
    # 截断区间外梯度为零
    d_log_sigma = d_log_sigma * ((raw_log_sigma >= LOG_SIGMA_MIN) & (raw_log_sigma <= LOG_SIGMA_MAX))
    enc_grads = backward(model.encoder, enc_tape, np.concatenate([d_mu, d_log_sigma], axis=1))
    return loss, enc_grads.as_list() + dec_grads.as_list()


class TrainResult(NamedTuple):
    model: VaeModel
    losses: List[float]

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


def train(model: VaeModel, dataset: Dataset, config: TrainConfig, start_step: int = 0) -> TrainResult:
    """在数据集上训练模型的副本（输入模型不被修改）

    每步无放回抽取一个小批量，每个样本一次重参数化噪声。第 k 步（全局编号）
    的随机数只由 (config.seed, train, k) 决定；从检查点继续训练时传入已训练
    步数 start_step，续训不会重放前面各步的小批量。

    Raises:
        DataError: 数据维度与模型不一致或批量大于数据集
        TrainingDivergedError: 损失或梯度出现非有限值，携带已记录的损失轨迹
    """
    if dataset.obs_dim != model.obs_dim:
        raise DataError(f"数据集维度 {dataset.obs_dim} 与模型观测维度 {model.obs_dim} 不一致")
    if config.steps > 0 and not 1 <= config.batch_size <= dataset.n:
        raise DataError(f"批量大小 {config.batch_size} 必须位于 [1, N={dataset.n}]")
    if start_step < 0:
        raise DataError(f"起始步数必须非负: {start_step}")

    trained = model.copy()
    trained.beta = config.beta
    params = trained.parameters()
    state = AdamState(params, lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2)
    observations = dataset.observations
    losses: List[float] = []

    logger.info(f"开始训练: 步数={config.steps}, 批量={config.batch_size}, lr={config.lr}, β={config.beta}, "
                f"d={trained.latent_dim}, 隐藏层={list(config.hidden)}")
    last = start_step + config.steps
    for step in range(start_step + 1, last + 1):
        rng = make_rng(config.seed, STREAM_TRAIN, step)
        if config.batch_size < dataset.n:
            indices = rng.choice(dataset.n, size=config.batch_size, replace=False)
        else:
            indices = np.arange(dataset.n)
        noise = rng.standard_normal((indices.size, trained.latent_dim))
        try:
            loss, grads = elbo_loss(trained, observations[indices], noise=noise)
            adam_step(params, grads, state)
        except NumericalError as e:
            logger.error(f"训练在第 {step} 步发散: {str(e)}")
            raise TrainingDivergedError(f"训练在第 {step} 步发散: {str(e)}", step, losses)
        trained.mark_updated()
        losses.append(loss)
        if step % config.log_every == 0 or step == last:
            logger.info(f"第 {step}/{last} 步: 损失={loss:.6f}")
    return TrainResult(trained, losses)


def reconstruction_mse(model: VaeModel, observations) -> float:
    """用后验均值重构的均方误差（原始单位，对所有坐标取平均）"""
    observations = np.atleast_2d(_check_dim(observations, model.obs_dim, "观测"))
    reconstructed = decode(model, encode(model, observations).mu)
    return float(np.mean((reconstructed - observations) ** 2))


def linear_vae(encoder_weight, decoder_weight, encoder_bias=None, decoder_bias=None,
               log_sigma=0.0, beta: float = 1.0) -> VaeModel:
    """手工构造单层线性模型：mu = W_e x + b_e，log σ 为常数，g(z) = W_d z + b_d"""
    encoder_weight = np.array(encoder_weight, dtype=np.float64, ndmin=2)
    decoder_weight = np.array(decoder_weight, dtype=np.float64, ndmin=2)
    d, obs_dim = encoder_weight.shape
    if decoder_weight.shape != (obs_dim, d):
        raise ModelError(f"解码器权重形状必须为 {(obs_dim, d)}，实际 {decoder_weight.shape}")
    encoder_bias = np.zeros(d) if encoder_bias is None else np.asarray(encoder_bias, dtype=np.float64)
    decoder_bias = np.zeros(obs_dim) if decoder_bias is None else np.asarray(decoder_bias, dtype=np.float64)
    log_sigma = np.broadcast_to(np.asarray(log_sigma, dtype=np.float64), (d,))
    encoder = Mlp([DenseLayer(np.vstack([encoder_weight, np.zeros((d, obs_dim))]),
                              np.concatenate([encoder_bias, log_sigma]), Activation.IDENTITY)])
    decoder = Mlp([DenseLayer(decoder_weight, decoder_bias, Activation.IDENTITY)])
    return VaeModel(encoder, decoder, d, beta)


def identity_vae(dim: int, log_sigma: float = 0.0) -> VaeModel:
    """编码器与解码器都是恒等映射的模型（D = d）"""
    return linear_vae(np.eye(dim), np.eye(dim), log_sigma=log_sigma)


def constant_decoder_vae(dim: int, output, log_sigma: float = 0.0) -> VaeModel:
    """恒等编码器 + 常数解码器"""
    return linear_vae(np.eye(dim), np.zeros((dim, dim)), decoder_bias=output, log_sigma=log_sigma)


def supervised_linear_vae(dataset: Dataset, log_sigma: float = -5.0, rotation_deg: float = 0.0,
                          rotation_dims: Sequence[int] = (0, 1)) -> VaeModel:
    """用标签构造的解耦线性模型：潜变量 j 是因子 j 的标准化取值

    编码器权重由最小二乘从观测回归到标准化标签得到，解码器取其伪逆，
    因此 h(z) = z。rotation_deg 非零时在 rotation_dims 平面内旋转潜空间。
    """
    dataset.require_labels("构造监督线性模型")
    x = dataset.observations
    y = dataset.labels
    y_std = y.std(axis=0)
    y_std = np.where(y_std > 0, y_std, 1.0)
    targets = (y - y.mean(axis=0)) / y_std
    x_mean = x.mean(axis=0)
    coef, _, rank, _ = np.linalg.lstsq(x - x_mean, targets, rcond=None)
    logger.info(f"监督线性模型回归秩: {rank}")

    weight = coef.T
    factor_count = weight.shape[0]
    if rotation_deg:
        angle = np.deg2rad(rotation_deg)
        rotation = np.eye(factor_count)
        a, b = rotation_dims
        rotation[a, a] = rotation[b, b] = np.cos(angle)
        rotation[a, b] = -np.sin(angle)
        rotation[b, a] = np.sin(angle)
        weight = rotation @ weight
    decoder_weight = np.linalg.pinv(weight)
    return linear_vae(weight, decoder_weight, encoder_bias=-weight @ x_mean,
                      decoder_bias=x_mean, log_sigma=log_sigma)


def _network_record(net: Mlp) -> NetworkRecord:
    return NetworkRecord(layers=[
        LayerRecord(weight=layer.weight.tolist(), bias=layer.bias.tolist(), activation=layer.activation)
        for layer in net.layers
    ])


def _network_from_record(record: NetworkRecord) -> Mlp:
    return Mlp([DenseLayer(np.array(layer.weight, dtype=np.float64), np.array(layer.bias, dtype=np.float64),
                           layer.activation) for layer in record.layers])


def to_checkpoint(model: VaeModel, steps_trained: int = 0, final_loss: Optional[float] = None,
                  train_config: Optional[Dict[str, Any]] = None) -> Checkpoint:
    activations = [layer.activation for layer in model.encoder.layers]
    return Checkpoint(
        code_version=__version__,
        latent_dim=model.latent_dim,
        obs_dim=model.obs_dim,
        beta=model.beta,
        seed=model.seed,
        hidden=model.encoder.sizes[1:-1],
        activations=activations,
        obs_shift=model.standardizer.shift.tolist(),
        obs_scale=model.standardizer.scale.tolist(),
        steps_trained=steps_trained,
        final_loss=final_loss,
        train=train_config,
        encoder=_network_record(model.encoder),
        decoder=_network_record(model.decoder),
    )


def from_checkpoint(checkpoint: Checkpoint) -> VaeModel:
    standardizer = Standardizer(checkpoint.obs_shift, checkpoint.obs_scale)
    return VaeModel(_network_from_record(checkpoint.encoder), _network_from_record(checkpoint.decoder),
                    checkpoint.latent_dim, checkpoint.beta, standardizer, checkpoint.seed)


def save_checkpoint(path: str, model: VaeModel, steps_trained: int = 0, final_loss: Optional[float] = None,
                    train_config: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """写出检查点（JSON，浮点数使用最短往返表示，重新读取逐位一致）"""
    checkpoint = to_checkpoint(model, steps_trained, final_loss, train_config)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(checkpoint.json(indent=2, sort_keys=True))
        f.write("\n")
    logger.info(f"已保存检查点 {path}")
    return checkpoint


def load_checkpoint(path: str) -> Tuple[VaeModel, Checkpoint]:
    """读取检查点

    Raises:
        ModelError: 文件不存在或格式非法
    """
    if not os.path.exists(path):
        raise ModelError(f"检查点文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            checkpoint = Checkpoint.parse_obj(json.load(f))
    except (ValueError, ValidationError) as e:
        raise ModelError(f"检查点格式非法 {path}: {str(e)}")
    return from_checkpoint(checkpoint), checkpoint
