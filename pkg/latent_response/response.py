"""潜变量响应：响应函数与响应场、干预、响应矩阵、条件响应矩阵、CDS、
响应分布、一阶展开诊断，以及简化的线性责任矩阵基线

蒙特卡洛估计按固定大小的计数器块生成随机数（见 app.utils.rng），
结果与并行线程数无关。
"""

import csv
import logging
import os
import warnings
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import Lasso, MultiTaskLasso

from app.core.config import settings
from app.models.config import InterventionSource
from app.utils.rng import STREAM_MC, derive_seed, make_rng, map_blocks
from latent_response.data import Dataset, sample_conditioned, strata
from latent_response.error_handler import DataError
from latent_response.nn_core import numerical_jacobian
from latent_response.vae import VaeModel, decode, encode, encoder_mean

# 配置日志
logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 10000


class NoiseMode(str, Enum):
    """响应分布的采样方式"""
    POSTERIOR = "posterior"
    NONE = "none"


class ResponseMatrix:
    """d × d 潜变量响应矩阵：M[j, k] 为干预维度 j 时维度 k 的均方根响应"""

    def __init__(self, entries, sample_count: int, intervention_source: InterventionSource):
        self.entries = np.asarray(entries, dtype=np.float64)
        self.sample_count = int(sample_count)
        self.intervention_source = InterventionSource(intervention_source)

    @property
    def latent_dim(self) -> int:
        return self.entries.shape[0]


class ConditionedResponseMatrix:
    """d* × d 条件响应矩阵：M*[c, j] 为只改变因子 c 的干预在维度 j 上的可检测程度"""

    def __init__(self, entries, sample_counts, factor_names: Optional[Sequence[str]] = None):
        self.entries = np.asarray(entries, dtype=np.float64)
        self.sample_counts = np.asarray(sample_counts, dtype=np.int64)
        self.factor_names = list(factor_names) if factor_names is not None else [
            f"y{c + 1}" for c in range(self.entries.shape[0])]


class ResponsibilityMatrix:
    """d* × d 线性责任矩阵（简化基线，不是参考 DCI 实现）"""

    def __init__(self, entries, raw_importance, degenerate_factors: Sequence[int],
                 factor_names: Optional[Sequence[str]] = None):
        self.entries = np.asarray(entries, dtype=np.float64)
        self.raw_importance = np.asarray(raw_importance, dtype=np.float64)
        self.degenerate_factors = list(degenerate_factors)
        self.factor_names = list(factor_names) if factor_names is not None else [
            f"y{c + 1}" for c in range(self.entries.shape[0])]


class ResponseSamples(NamedTuple):
    """响应分布 r(Ẑ|Z) 的样本"""
    base: np.ndarray
    draws: np.ndarray
    mean: np.ndarray
    variance: np.ndarray


class ExpansionReport(NamedTuple):
    """ŝ 的一阶展开：ŝ = s + (f(g(s)) − s) + J_f(g(s)) J_g(s) u + 余项

    term2_linear 为 term2 在 x 处的一阶近似 J_f(x) (g(s) − x)，仅供参考，不进入余项。
    """
    s: np.ndarray
    s_hat: np.ndarray
    term1: np.ndarray
    term2: np.ndarray
    term3: np.ndarray
    term2_linear: np.ndarray
    residual: np.ndarray
    residual_norm: float
    epsilon: np.ndarray


class CdsResult(NamedTuple):
    score: float
    raw: float
    dropped_columns: List[int]


def latent_response(model: VaeModel, z) -> np.ndarray:
    """h(z) = f(g(z))，使用编码器均值"""
    return encoder_mean(model, decode(model, z))


def response_field(model: VaeModel, z) -> np.ndarray:
    """u(z) = h(z) − z"""
    z = np.asarray(z, dtype=np.float64)
    return latent_response(model, z) - z


def intervene(z, j: int, value) -> np.ndarray:
    """Δ^(z_j ← value)(z)：只替换第 j 个坐标，返回新数组"""
    z = np.array(z, dtype=np.float64)
    d = z.shape[-1]
    if not 0 <= j < d:
        raise DataError(f"干预维度越界: {j}，潜变量维度为 {d}")
    z[..., j] = value
    return z


def _block_settings(block_size: Optional[int], workers: Optional[int]) -> Tuple[int, int]:
    return (block_size or settings.MC_BLOCK_SIZE, workers or settings.MC_WORKERS)


def response_matrix(model: VaeModel, n_samples: int = DEFAULT_SAMPLES,
                    source: InterventionSource = InterventionSource.PRIOR, seed: int = 0,
                    dataset: Optional[Dataset] = None, block_size: Optional[int] = None,
                    workers: Optional[int] = None) -> ResponseMatrix:
    """M[j, k]² = ½ E[ |h_k(Δ^(z_j←z̃_j)(z)) − h_k(z)|² ]，z ~ N(0, I)

    Args:
        model: 模型
        n_samples: z 的抽样数
        source: PRIOR 时 z̃_j ~ N(0, 1)；AGGREGATE_POSTERIOR 时 z̃_j 取随机数据行的后验样本第 j 维
        seed: 根种子（mc 子流）
        dataset: AGGREGATE_POSTERIOR 需要的数据集
    """
    if n_samples < 1:
        raise DataError(f"抽样数必须至少为1: {n_samples}")
    source = InterventionSource(source)
    if source is InterventionSource.AGGREGATE_POSTERIOR and (dataset is None or dataset.n == 0):
        raise DataError("聚合后验干预需要非空数据集")
    d = model.latent_dim
    block_size, workers = _block_settings(block_size, workers)

    def block(rng: np.random.Generator, m: int) -> np.ndarray:
        z = rng.standard_normal((m, d))
        base = latent_response(model, z)
        sums = np.zeros((d, d))
        for j in range(d):
            if source is InterventionSource.PRIOR:
                value = rng.standard_normal(m)
            else:
                rows = rng.integers(0, dataset.n, size=m)
                post = encode(model, dataset.observations[rows])
                value = post.mu[:, j] + post.sigma[:, j] * rng.standard_normal(m)
            diff = latent_response(model, intervene(z, j, value)) - base
            sums[j] = np.sum(diff * diff, axis=0)
        return sums

    totals = np.zeros((d, d))
    for part in map_blocks(block, n_samples, seed, STREAM_MC, block_size, workers, prefix=(0,)):
        totals += part
    entries = np.sqrt(0.5 * totals / n_samples)
    logger.info(f"响应矩阵估计完成: d={d}, 抽样数={n_samples}, 干预来源={source.value}")
    return ResponseMatrix(entries, n_samples, source)


def collapsed_dimensions(matrix: ResponseMatrix, threshold: float = 0.1) -> List[int]:
    """对角线响应低于阈值的维度（后验坍塌的迹象）"""
    return [j for j in range(matrix.latent_dim) if matrix.entries[j, j] < threshold]


def conditioned_response_matrix(model: VaeModel, dataset: Dataset, n_samples: int = DEFAULT_SAMPLES,
                                seed: int = 0, block_size: Optional[int] = None,
                                workers: Optional[int] = None) -> ConditionedResponseMatrix:
    """M*[c, j]² = ½ E[ |h_j(Δ^(z_j←z̃_j)(z)) − h_j(z)|² ]

    对每个因子 c，按 Y_{−c} 的已观测取值分层，抽样数在各层间平均分配。
    层内 z 的其余坐标来自先验，z_j 与 z̃_j 分别取两个只有 Y_c 自由变化的
    样本的后验抽样第 j 维，两者共用同一个标准正态噪声 ε：
    z_j = μ_j(x) + σ_j(x) ε，z̃_j = μ_j(x') + σ_j(x') ε。
    只有响应的第 j 个坐标进入期望。
    """
    dataset.require_labels("条件响应矩阵")
    if n_samples < 1:
        raise DataError(f"抽样数必须至少为1: {n_samples}")
    d = model.latent_dim
    block_size, workers = _block_settings(block_size, workers)
    entries = np.zeros((dataset.factor_count, d))
    counts = np.zeros((dataset.factor_count, d), dtype=np.int64)

    for c in range(dataset.factor_count):
        groups = strata(dataset, c)
        per_stratum = max(1, n_samples // len(groups))
        if len(groups) > n_samples:
            logger.warning(f"因子 {dataset.factor_names[c]} 的分层数 {len(groups)} 超过抽样数，每层抽取1个样本")
        for j in range(d):
            total = 0.0
            for s, (fixed, _) in enumerate(groups):
                def block(rng: np.random.Generator, m: int, fixed=fixed, j=j) -> float:
                    z = rng.standard_normal((m, d))
                    x_base = sample_conditioned(dataset, fixed, m, rng)
                    x_new = sample_conditioned(dataset, fixed, m, rng)
                    post_base = encode(model, x_base)
                    post_new = encode(model, x_new)
                    # 两次后验抽样共用同一噪声，只与 Y_c 无关的维度响应为零
                    eps = rng.standard_normal(m)
                    z[:, j] = post_base.mu[:, j] + post_base.sigma[:, j] * eps
                    value = post_new.mu[:, j] + post_new.sigma[:, j] * eps
                    before = latent_response(model, z)[:, j]
                    after = latent_response(model, intervene(z, j, value))[:, j]
                    return float(np.sum((after - before) ** 2))

                for part in map_blocks(block, per_stratum, seed, STREAM_MC, block_size, workers,
                                       prefix=(1, c, j, s)):
                    total += part
            count = per_stratum * len(groups)
            counts[c, j] = count
            entries[c, j] = np.sqrt(0.5 * total / count)
        logger.info(f"因子 {dataset.factor_names[c]}: {len(groups)} 个分层，每层 {per_stratum} 个抽样")
    return ConditionedResponseMatrix(entries, counts, dataset.factor_names)


def _entries(matrix) -> np.ndarray:
    if isinstance(matrix, (ConditionedResponseMatrix, ResponsibilityMatrix, ResponseMatrix)):
        return matrix.entries
    return np.asarray(matrix, dtype=np.float64)


def cds_details(matrix: Union[ConditionedResponseMatrix, ResponsibilityMatrix, np.ndarray]) -> CdsResult:
    """因果解耦分数：raw = Σ_j max_c M*[c, j] / Σ_{c,j} M*[c, j]，
    score = (raw − 1/d*) / (1 − 1/d*)；全零列从两个求和中去掉

    Raises:
        DataError: 矩阵含负值或非有限值、少于两个因子，或全为零
    """
    entries = _entries(matrix)
    if entries.ndim != 2 or entries.shape[0] < 2:
        raise DataError(f"CDS 需要至少两个因子的二维矩阵，实际形状 {entries.shape}")
    if not np.all(np.isfinite(entries)) or np.any(entries < 0):
        raise DataError("CDS 需要非负且有限的矩阵")
    keep = np.any(entries > 0, axis=0)
    dropped = [int(j) for j in np.flatnonzero(~keep)]
    if not np.any(keep):
        raise DataError("矩阵全为零，CDS 无定义")
    if dropped:
        logger.warning(f"CDS 计算中忽略全零列: {dropped}")
    kept = entries[:, keep]
    raw = float(np.sum(kept.max(axis=0)) / np.sum(kept.sum(axis=0)))
    factor_count = entries.shape[0]
    score = (raw - 1.0 / factor_count) / (1.0 - 1.0 / factor_count)
    return CdsResult(float(np.clip(score, 0.0, 1.0)), raw, dropped)


def cds(matrix, rescale: bool = True) -> float:
    """因果解耦分数（默认返回缩放到 [0, 1] 的值）"""
    result = cds_details(matrix)
    return result.score if rescale else result.raw


def sample_response_distribution(model: VaeModel, z, n: int, noise_mode: NoiseMode = NoiseMode.POSTERIOR,
                                 seed: int = 0) -> ResponseSamples:
    """从 r(Ẑ|Z=z) 抽样：x̂ = g(z)（确定性），ẑ ~ N(f(x̂), σ(x̂)²)"""
    if n < 1:
        raise DataError(f"抽样数必须至少为1: {n}")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    post = encode(model, decode(model, z))
    if NoiseMode(noise_mode) is NoiseMode.NONE:
        draws = np.tile(post.mu, (n, 1))
    else:
        rng = make_rng(seed, STREAM_MC, 2)
        draws = post.mu + post.sigma * rng.standard_normal((n, model.latent_dim))
    variance = draws.var(axis=0) if n > 1 else np.zeros(model.latent_dim)
    return ResponseSamples(z, draws, draws.mean(axis=0), variance)


def expansion_diagnostic(model: VaeModel, x, u, h: Optional[float] = None) -> ExpansionReport:
    """计算 ŝ = f(g(s + u)) 的一阶展开三项及余项

    Args:
        model: 模型
        x: 原始单位的观测
        u: 外生噪声向量（长度 d）
        h: 数值雅可比步长，默认 settings.FD_STEP
    """
    h = h or settings.FD_STEP
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.shape[0] != model.latent_dim:
        raise DataError(f"噪声维度 {u.shape[0]} 与潜变量维度 {model.latent_dim} 不一致")
    s = encoder_mean(model, x)
    x_rec = decode(model, s)
    x_hat = decode(model, s + u)
    s_hat = encoder_mean(model, x_hat)
    # f 在 g(s) 处展开，余项只含 u 的二阶及以上项
    jac_f = numerical_jacobian(lambda v: encoder_mean(model, v), x_rec, h)
    jac_g = numerical_jacobian(lambda v: decode(model, v), s, h)
    jac_f_data = numerical_jacobian(lambda v: encoder_mean(model, v), x, h)
    term1 = s
    term2 = encoder_mean(model, x_rec) - s
    term3 = jac_f @ (jac_g @ u)
    term2_linear = jac_f_data @ (x_rec - x)
    residual = s_hat - (term1 + term2 + term3)
    return ExpansionReport(s, s_hat, term1, term2, term3, term2_linear, residual,
                           float(np.linalg.norm(residual)), x_hat - x)


def expansion_scaling(model: VaeModel, x, u, h: Optional[float] = None) -> Tuple[float, float, Optional[float]]:
    """噪声减半实验：返回 (‖余项(u)‖, ‖余项(u/2)‖, 比值)"""
    u = np.asarray(u, dtype=np.float64)
    full = expansion_diagnostic(model, x, u, h).residual_norm
    half = expansion_diagnostic(model, x, u / 2.0, h).residual_norm
    return full, half, (full / half if half > 0 else None)


def responsibility_matrix(model: VaeModel, dataset: Dataset, alpha: float = 0.01,
                          seed: int = 0) -> ResponsibilityMatrix:
    """简化的 DCI 责任矩阵：对每个因子用 L1 正则线性模型从编码器均值预测因子，
    条目为归一化的 |权重|。离散因子使用独热目标（MultiTaskLasso），连续因子使用标准化标量。
    """
    dataset.require_labels("责任矩阵")
    mus = encoder_mean(model, dataset.observations)
    std = mus.std(axis=0)
    features = (mus - mus.mean(axis=0)) / np.where(std > 0, std, 1.0)
    d = model.latent_dim
    importance = np.zeros((dataset.factor_count, d))
    degenerate = []

    for c in range(dataset.factor_count):
        target = dataset.labels[:, c]
        if np.all(target == target[0]):
            logger.warning(f"因子 {dataset.factor_names[c]} 为常数，责任矩阵该行置零")
            degenerate.append(c)
            continue
        random_state = derive_seed(seed, "responsibility", c)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=ConvergenceWarning)
            if dataset.factor_cardinalities[c] is not None:
                levels = np.unique(target)
                onehot = (target[:, None] == levels[None, :]).astype(np.float64)
                regressor = MultiTaskLasso(alpha=alpha, random_state=random_state, max_iter=5000)
                regressor.fit(features, onehot)
                importance[c] = np.abs(regressor.coef_).sum(axis=0)
            else:
                scaled = (target - target.mean()) / target.std()
                regressor = Lasso(alpha=alpha, random_state=random_state, max_iter=5000)
                regressor.fit(features, scaled)
                importance[c] = np.abs(regressor.coef_)

    totals = importance.sum(axis=1, keepdims=True)
    entries = np.divide(importance, totals, out=np.zeros_like(importance), where=totals > 0)
    for c in np.flatnonzero(totals[:, 0] == 0):
        if c not in degenerate:
            logger.warning(f"因子 {dataset.factor_names[c]} 的全部权重被 L1 正则压为零")
    return ResponsibilityMatrix(entries, importance, degenerate, dataset.factor_names)


def write_matrix_csv(path: str, entries, row_labels: Sequence[str], col_labels: Sequence[str]) -> None:
    """矩阵导出为 CSV：第一行为列标签，每行以行标签开头"""
    entries = np.asarray(entries, dtype=np.float64)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([""] + list(col_labels))
        for label, row in zip(row_labels, entries):
            writer.writerow([label] + [format(float(v), ".17g") for v in row])
