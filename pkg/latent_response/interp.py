"""曲率引导的潜空间插值

在平均曲率图的 8 邻接网格图上做 Dijkstra 最短路，
节点权重 w = exp(−γ·Ĥ)，使路径尽量停留在高曲率（流形附近）区域。
"""

import heapq
import logging
import os
from enum import Enum
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from latent_response.error_handler import DataError, UsageError
from latent_response.geometry import ScalarMap
from latent_response.vae import VaeModel, decode

# 配置日志
logger = logging.getLogger(__name__)

NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class PathMethod(str, Enum):
    STRAIGHT = "straight"
    CURVATURE_GUIDED = "curvature_guided"


class LatentPath:
    """潜空间路径：首尾航点等于请求的端点"""

    def __init__(self, waypoints, cost: float, method: PathMethod, nodes: Optional[List[Tuple[int, int]]] = None):
        self.waypoints = np.asarray(waypoints, dtype=np.float64)
        self.cost = float(cost)
        self.method = PathMethod(method)
        self.nodes = nodes

    def __len__(self) -> int:
        return self.waypoints.shape[0]

    @property
    def latent_length(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)))


class AmbientMetrics(NamedTuple):
    total_length: float
    max_jump: float
    decoded: np.ndarray
    jumps: np.ndarray


def _as_vector(value, name: str) -> np.ndarray:
    vector = np.asarray(value, dtype=np.float64).reshape(-1)
    if vector.size == 0 or not np.all(np.isfinite(vector)):
        raise DataError(f"{name} 必须是非空的有限向量")
    return vector


def straight_path(a, b, count: int = 64) -> LatentPath:
    """线段 [a, b] 上等间距的 count 个点"""
    a = _as_vector(a, "起点")
    b = _as_vector(b, "终点")
    if a.shape != b.shape:
        raise DataError(f"端点维度不一致: {a.shape[0]} 与 {b.shape[0]}")
    if count < 2:
        raise UsageError(f"航点数必须至少为2: {count}")
    t = np.linspace(0.0, 1.0, count)[:, None]
    waypoints = (1.0 - t) * a + t * b
    path = LatentPath(waypoints, 0.0, PathMethod.STRAIGHT)
    path.cost = path.latent_length
    return path


def node_weights(curvature: ScalarMap, gamma: float) -> np.ndarray:
    """w = exp(−γ·Ĥ)，Ĥ 为按 |H| 的第 99 百分位截断后的曲率"""
    if gamma < 0:
        raise UsageError(f"γ 必须非负: {gamma}")
    values = np.where(np.isfinite(curvature.values), curvature.values, 0.0)
    bound = float(np.percentile(np.abs(values), 99))
    clipped = np.clip(values, -bound, bound)
    return np.exp(-gamma * clipped)


def _snap(curvature: ScalarMap, point: np.ndarray, name: str) -> Tuple[int, int]:
    sliced = point[list(curvature.dims)]
    node = curvature.nearest_node(sliced)
    if node is None:
        raise DataError(f"{name} 超出网格范围: 切片坐标 {sliced.tolist()}，"
                        f"范围 {[list(r) for r in curvature.ranges]}")
    return node


def _dijkstra(weights: np.ndarray, spacing: Tuple[float, float], start: Tuple[int, int],
              goal: Tuple[int, int]) -> Tuple[float, List[Tuple[int, int]]]:
    size = weights.shape[0]
    dist = np.full(weights.shape, np.inf)
    previous = {}
    dist[start] = 0.0
    heap = [(0.0, start)]
    visited = np.zeros(weights.shape, dtype=bool)
    steps = {(di, dj): float(np.hypot(di * spacing[0], dj * spacing[1])) for di, dj in NEIGHBOR_OFFSETS}

    while heap:
        current_dist, node = heapq.heappop(heap)
        if visited[node]:
            continue
        visited[node] = True
        if node == goal:
            break
        i, j = node
        for di, dj in NEIGHBOR_OFFSETS:
            ni, nj = i + di, j + dj
            if not (0 <= ni < size and 0 <= nj < size) or visited[ni, nj]:
                continue
            candidate = current_dist + steps[(di, dj)] * 0.5 * (weights[i, j] + weights[ni, nj])
            if candidate < dist[ni, nj]:
                dist[ni, nj] = candidate
                previous[(ni, nj)] = node
                heapq.heappush(heap, (candidate, (ni, nj)))

    nodes = [goal]
    while nodes[-1] != start:
        nodes.append(previous[nodes[-1]])
    nodes.reverse()
    return float(dist[goal]), nodes


def curvature_path(curvature: ScalarMap, a, b, gamma: float = 2.0) -> LatentPath:
    """曲率引导路径

    端点先吸附到最近的网格节点，在网格图上求最小代价路径，再补上精确端点。
    切片外的坐标沿路径弧长在 a 与 b 之间线性插值。

    Raises:
        DataError: 端点的切片坐标超出网格范围
    """
    a = _as_vector(a, "起点")
    b = _as_vector(b, "终点")
    if a.shape != b.shape:
        raise DataError(f"端点维度不一致: {a.shape[0]} 与 {b.shape[0]}")
    if max(curvature.dims) >= a.shape[0]:
        raise DataError(f"端点维度 {a.shape[0]} 不包含切片维度 {list(curvature.dims)}")
    start = _snap(curvature, a, "起点")
    goal = _snap(curvature, b, "终点")
    if np.array_equal(a, b):
        return LatentPath(a[None, :], 0.0, PathMethod.CURVATURE_GUIDED, [start])
    weights = node_weights(curvature, gamma)
    cost, nodes = _dijkstra(weights, curvature.spacing, start, goal)

    first, second = curvature.axes
    slice_points = np.array([[first[i], second[j]] for i, j in nodes])
    if len(slice_points) > 1:
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(slice_points, axis=0), axis=1))])
        progress = arc / arc[-1] if arc[-1] > 0 else np.zeros_like(arc)
    else:
        progress = np.zeros(1)
    waypoints = (1.0 - progress)[:, None] * a + progress[:, None] * b
    waypoints[:, list(curvature.dims)] = slice_points

    if not np.array_equal(waypoints[0], a):
        waypoints = np.vstack([a, waypoints])
    if not np.array_equal(waypoints[-1], b):
        waypoints = np.vstack([waypoints, b])
    logger.info(f"曲率引导路径: {len(nodes)} 个网格节点, 代价 {cost:.6g}, γ={gamma}")
    return LatentPath(waypoints, cost, PathMethod.CURVATURE_GUIDED, nodes)


def densify(path: LatentPath, max_step: float) -> LatentPath:
    """在相邻航点间插入线性分点，使每段潜空间步长不超过 max_step

    原航点全部保留，代价、方法与网格节点不变。
    """
    if max_step <= 0:
        raise UsageError(f"最大步长必须为正: {max_step}")
    if len(path) < 2:
        return LatentPath(path.waypoints.copy(), path.cost, path.method, path.nodes)
    pieces = [path.waypoints[:1]]
    for a, b in zip(path.waypoints[:-1], path.waypoints[1:]):
        parts = max(1, int(np.ceil(np.linalg.norm(b - a) / max_step)))
        t = np.arange(1, parts + 1)[:, None] / parts
        segment = (1.0 - t) * a + t * b
        segment[-1] = b
        pieces.append(segment)
    waypoints = np.vstack(pieces)
    logger.debug(f"路径加密: {len(path)} -> {waypoints.shape[0]} 个航点")
    return LatentPath(waypoints, path.cost, path.method, path.nodes)


def ambient_metrics(model: VaeModel, path: LatentPath) -> AmbientMetrics:
    """解码全部航点，返回相邻解码点距离的总和与最大值"""
    decoded = decode(model, path.waypoints)
    if len(path) < 2:
        return AmbientMetrics(0.0, 0.0, decoded, np.zeros(0))
    jumps = np.linalg.norm(np.diff(decoded, axis=0), axis=1)
    return AmbientMetrics(float(jumps.sum()), float(jumps.max()), decoded, jumps)


def write_path_csv(path_file: str, path: LatentPath, metrics: AmbientMetrics) -> None:
    """路径导出：每个航点一行 (z..., x..., jump)，jump 为与前一航点解码结果的距离"""
    d = path.waypoints.shape[1]
    obs_dim = metrics.decoded.shape[1]
    header = [f"z{k + 1}" for k in range(d)] + [f"x{k + 1}" for k in range(obs_dim)] + ["jump"]
    jumps = np.concatenate([[0.0], metrics.jumps])
    directory = os.path.dirname(path_file)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path_file, "w", encoding="utf-8") as f:
            f.write(",".join(header) + "\n")
            for z, x, jump in zip(path.waypoints, metrics.decoded, jumps):
                values = list(z) + list(x) + [jump]
                f.write(",".join(format(float(v), ".17g") for v in values) + "\n")
    except OSError as e:
        raise DataError(f"无法写入 {path_file}: {e}") from e
