"""带真实因子的合成数据集：双螺旋、离散因子数据集，以及数据集 CSV 读写"""

import csv
import itertools
import logging
import os
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.models.config import FactorConfig, HelixConfig
from app.utils.rng import STREAM_DATA, make_rng
from latent_response.error_handler import DataError
from latent_response.nn_core import Activation, Mlp, predict

# 配置日志
logger = logging.getLogger(__name__)


class Dataset:
    """观测矩阵 (N × D)，可选的因子标签 (N × d*) 和离散因子的水平数"""

    def __init__(self, observations, labels=None,
                 factor_cardinalities: Optional[Sequence[Optional[int]]] = None,
                 factor_names: Optional[Sequence[str]] = None):
        observations = np.asarray(observations, dtype=np.float64)
        if observations.ndim != 2:
            raise DataError(f"观测必须是二维矩阵，实际形状 {observations.shape}")
        if not np.all(np.isfinite(observations)):
            raise DataError("观测包含非有限值")
        self.observations = observations

        if labels is None:
            if factor_cardinalities is not None:
                raise DataError("没有标签时不能指定因子水平数")
            self.labels = None
            self.factor_cardinalities = None
            self.factor_names = None
            return

        labels = np.asarray(labels, dtype=np.float64)
        if labels.ndim == 1:
            labels = labels.reshape(-1, 1)
        if labels.shape[0] != observations.shape[0]:
            raise DataError(f"标签行数 {labels.shape[0]} 与观测行数 {observations.shape[0]} 不一致")
        factor_count = labels.shape[1]
        cardinalities = list(factor_cardinalities) if factor_cardinalities is not None else [None] * factor_count
        if len(cardinalities) != factor_count:
            raise DataError(f"水平数列表长度 {len(cardinalities)} 与因子数 {factor_count} 不一致")
        for c, card in enumerate(cardinalities):
            if card is None:
                continue
            column = labels[:, c]
            if np.any(column != np.round(column)) or np.any(column < 0) or np.any(column >= card):
                raise DataError(f"因子 {c} 的离散标签必须是 [0, {card}) 内的整数")
        self.labels = labels
        self.factor_cardinalities = [None if card is None else int(card) for card in cardinalities]
        self.factor_names = list(factor_names) if factor_names is not None else [f"y{c + 1}" for c in range(factor_count)]

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    @property
    def factor_count(self) -> int:
        return 0 if self.labels is None else self.labels.shape[1]

    def require_labels(self, purpose: str = "该操作") -> None:
        if not self.has_labels:
            raise DataError(f"{purpose}需要带标签的数据集")

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.observations[indices], labels, self.factor_cardinalities, self.factor_names)

    def equals(self, other: "Dataset") -> bool:
        """逐位比较观测、标签和水平数"""
        if not np.array_equal(self.observations, other.observations) or self.obs_dim != other.obs_dim:
            return False
        if self.has_labels != other.has_labels:
            return False
        if not self.has_labels:
            return True
        return np.array_equal(self.labels, other.labels) and self.factor_cardinalities == other.factor_cardinalities


class Standardizer:
    """逐维零均值、单位方差标准化参数"""

    def __init__(self, shift, scale):
        self.shift = np.asarray(shift, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise DataError("标准化尺度必须为正")

    @classmethod
    def fit(cls, observations) -> "Standardizer":
        observations = np.asarray(observations, dtype=np.float64)
        if observations.shape[0] == 0:
            raise DataError("空数据集无法计算标准化参数")
        std = observations.std(axis=0)
        # 常数维度保持原尺度
        std = np.where(std > 0, std, 1.0)
        return cls(observations.mean(axis=0), std)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def inverse(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.shift


def standardize(dataset: Dataset) -> Tuple[Dataset, Standardizer]:
    """返回标准化后的数据集和标准化参数"""
    standardizer = Standardizer.fit(dataset.observations)
    scaled = Dataset(standardizer.transform(dataset.observations), dataset.labels,
                     dataset.factor_cardinalities, dataset.factor_names)
    return scaled, standardizer


def gen_helix(config: HelixConfig) -> Dataset:
    """双螺旋数据集

    x_i = [A1 cos(π(ωt_i + n_i)), A2 sin(π(ωt_i + n_i)), A3 t_i] + ε_i，
    t_i ~ U(−1, 1)，n_i ~ Bernoulli(0.5)，ε_i ~ N(0, σ²I)；标签为 (t_i, n_i)。
    """
    rng = make_rng(config.seed, STREAM_DATA, 0)
    t = rng.uniform(-1.0, 1.0, size=config.n)
    strand = rng.integers(0, 2, size=config.n).astype(np.float64)
    noise = rng.normal(0.0, 1.0, size=(config.n, 3)) * config.sigma
    observations = helix_points(t, strand, config) + noise
    labels = np.stack([t, strand], axis=1)
    logger.info(f"已生成双螺旋数据集: N={config.n}, σ={config.sigma}")
    return Dataset(observations, labels, [None, 2], ["t", "strand"])


def helix_points(t, strand, config: HelixConfig) -> np.ndarray:
    """无噪声的螺旋点"""
    t = np.asarray(t, dtype=np.float64)
    phase = np.pi * (config.omega * t + np.asarray(strand, dtype=np.float64))
    return np.stack([config.a1 * np.cos(phase), config.a2 * np.sin(phase), config.a3 * t], axis=-1)


def helix_distance(points, config: HelixConfig, resolution: int = 4001) -> np.ndarray:
    """点到两条螺旋线的最小欧氏距离（在稠密参数网格上取最小值）"""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    t = np.linspace(-1.0, 1.0, resolution)
    curve = np.concatenate([helix_points(t, np.zeros_like(t), config),
                            helix_points(t, np.ones_like(t), config)], axis=0)
    distances = np.empty(points.shape[0])
    for start in range(0, points.shape[0], 256):
        chunk = points[start:start + 256]
        diff = chunk[:, None, :] - curve[None, :, :]
        distances[start:start + 256] = np.sqrt(np.min(np.sum(diff * diff, axis=-1), axis=1))
    return distances


class FactorGenerator:
    """离散因子数据集的固定生成过程：水平编码 + 随机两层 ELU 网络"""

    def __init__(self, config: FactorConfig):
        self.config = config
        code_rng = make_rng(config.embed_seed, "factor-codes")
        self.codes = [code_rng.normal(size=(card, config.code_dim)) for card in config.cardinalities]
        self.network = Mlp.initialize(
            [config.factor_count * config.code_dim, config.hidden_dim, config.obs_dim],
            make_rng(config.embed_seed, "factor-map"),
            hidden_activation=Activation.ELU,
            output_activation=Activation.IDENTITY,
        )
        # 隐藏层偏置随机化，使映射在编码原点附近也保持非线性
        self.network.layers[0].bias[:] = make_rng(config.embed_seed, "factor-bias").normal(
            0.0, 0.5, size=config.hidden_dim)

    def encode_factors(self, labels) -> np.ndarray:
        labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
        return np.concatenate([self.codes[c][labels[:, c]] for c in range(self.config.factor_count)], axis=1)

    def clean_observations(self, labels) -> np.ndarray:
        return predict(self.network, self.encode_factors(labels))


def enumerate_factors(cardinalities: Sequence[int]) -> np.ndarray:
    """按字典序枚举全部因子组合"""
    return np.array(list(itertools.product(*[range(c) for c in cardinalities])), dtype=np.float64)


def gen_factors(config: FactorConfig) -> Dataset:
    """完整枚举所有因子组合（重复 repeats 次）并生成观测"""
    generator = FactorGenerator(config)
    labels = np.tile(enumerate_factors(config.cardinalities), (config.repeats, 1))
    observations = generator.clean_observations(labels)
    if config.sigma > 0:
        rng = make_rng(config.seed, STREAM_DATA, 1)
        observations = observations + rng.normal(0.0, 1.0, size=observations.shape) * config.sigma
    logger.info(f"已生成因子数据集: 水平数={config.cardinalities}, N={labels.shape[0]}, D={config.obs_dim}")
    names = [f"factor{c}" for c in range(config.factor_count)]
    return Dataset(observations, labels, list(config.cardinalities), names)


def conditioned_indices(dataset: Dataset, fixed: Mapping[int, float]) -> np.ndarray:
    """标签在 fixed 指定的所有因子上都匹配的行下标

    Raises:
        DataError: 没有标签、因子下标越界或匹配集合为空
    """
    dataset.require_labels("条件采样")
    mask = np.ones(dataset.n, dtype=bool)
    for factor, value in fixed.items():
        if not 0 <= factor < dataset.factor_count:
            raise DataError(f"因子下标越界: {factor}，因子数为 {dataset.factor_count}")
        mask &= dataset.labels[:, factor] == value
    indices = np.flatnonzero(mask)
    if indices.size == 0:
        assignment = ", ".join(f"{dataset.factor_names[k]}={v}" for k, v in sorted(fixed.items()))
        raise DataError(f"没有与指定取值匹配的样本: {{{assignment}}}", {"assignment": dict(fixed)})
    return indices


def sample_conditioned(dataset: Dataset, fixed: Mapping[int, float], n: int,
                       rng: np.random.Generator, return_indices: bool = False):
    """在匹配 fixed 的行中均匀有放回抽取 n 个观测

    Args:
        dataset: 带标签的数据集
        fixed: 因子下标到取值的映射（通常固定除 Y_c 之外的全部因子）
        n: 抽样数量
        rng: 随机数生成器
        return_indices: 是否同时返回行下标
    """
    indices = conditioned_indices(dataset, fixed)
    chosen = indices[rng.integers(0, indices.size, size=n)]
    if return_indices:
        return dataset.observations[chosen], chosen
    return dataset.observations[chosen]


def strata(dataset: Dataset, free_factor: int) -> List[Tuple[Dict[int, float], np.ndarray]]:
    """按 Y_{−c} 的已观测取值分层，返回 (固定取值, 行下标) 列表，按取值字典序排列"""
    dataset.require_labels("分层")
    if not 0 <= free_factor < dataset.factor_count:
        raise DataError(f"因子下标越界: {free_factor}")
    others = [k for k in range(dataset.factor_count) if k != free_factor]
    if not others:
        return [({}, np.arange(dataset.n))]
    keys = dataset.labels[:, others]
    unique, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    result = []
    for s, values in enumerate(unique):
        fixed = {k: float(v) for k, v in zip(others, values)}
        result.append((fixed, np.flatnonzero(inverse == s)))
    return result


def shuffle_split(dataset: Dataset, fractions: Sequence[float] = (0.7, 0.1, 0.2),
                  seed: int = 0) -> Tuple[Dataset, ...]:
    """按比例随机划分数据集（默认 70-10-20）"""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise DataError(f"划分比例必须非负且和为1: {fractions.tolist()}")
    order = make_rng(seed, "split").permutation(dataset.n)
    bounds = np.round(np.cumsum(fractions) * dataset.n).astype(int)
    bounds[-1] = dataset.n
    parts = np.split(order, bounds[:-1])
    return tuple(dataset.subset(np.sort(part)) for part in parts)


def _format(value: float) -> str:
    return format(float(value), ".17g")


def write_csv(path: str, dataset: Dataset) -> None:
    """写出数据集：表头 x1..xD[, y1..yd*]，数值保留 17 位有效数字"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    header = [f"x{i + 1}" for i in range(dataset.obs_dim)]
    header += [f"y{c + 1}" for c in range(dataset.factor_count)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [_format(v) for v in dataset.observations[i]]
            if dataset.has_labels:
                row += [_format(v) for v in dataset.labels[i]]
            writer.writerow(row)
    logger.info(f"已写出数据集 {path}: N={dataset.n}, D={dataset.obs_dim}, d*={dataset.factor_count}")


def read_csv(path: str) -> Dataset:
    """读取 write_csv 格式的数据集

    Raises:
        DataError: 文件为空、表头非法或某行格式错误（包含行号）
    """
    if not os.path.exists(path):
        raise DataError(f"数据集文件不存在: {path}")
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: 文件为空，缺少表头")
        obs_cols = [k for k, name in enumerate(header) if name.startswith("x")]
        label_cols = [k for k, name in enumerate(header) if name.startswith("y")]
        expected = [f"x{i + 1}" for i in range(len(obs_cols))] + [f"y{c + 1}" for c in range(len(label_cols))]
        if header != expected or not obs_cols:
            raise DataError(f"{path}:1: 非法表头 {header}")

        rows = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: 期望 {len(header)} 列，实际 {len(row)} 列", {"line": line})
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise DataError(f"{path}:{line}: 存在无法解析的数值", {"line": line})
            if not all(np.isfinite(values)):
                raise DataError(f"{path}:{line}: 存在非有限数值", {"line": line})
            rows.append(values)

    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    observations = table[:, :len(obs_cols)]
    if not label_cols:
        return Dataset(observations)
    labels = table[:, len(obs_cols):]
    return Dataset(observations, labels, _infer_cardinalities(labels))


def _infer_cardinalities(labels: np.ndarray) -> List[Optional[int]]:
    """取值全为非负整数的标签列视为离散因子，水平数为最大值加一"""
    cardinalities: List[Optional[int]] = []
    for c in range(labels.shape[1]):
        column = labels[:, c]
        if column.size and np.all(column == np.round(column)) and np.all(column >= 0):
            cardinalities.append(int(column.max()) + 1)
        else:
            cardinalities.append(None)
    return cardinalities
