"""响应图：二维潜变量切片上的响应场网格、散度与平均曲率、导出

网格数组按 [i1, i2] 索引，第一个下标对应第一个切片维度。
"""

import logging
import os
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.models.config import MapFormat
from latent_response.error_handler import DataError, UsageError
from latent_response.response import response_field
from latent_response.vae import VaeModel

# 配置日志
logger = logging.getLogger(__name__)

Range = Tuple[float, float]


class MapKind(str, Enum):
    DIVERGENCE = "divergence"
    MEAN_CURVATURE = "mean_curvature"
    NORM = "norm"
    DENSITY = "density"


class ResponseGrid:
    """二维切片上的响应场

    Attributes:
        dims: 两个切片维度 (j1, j2)
        anchor: 固定其余 d−2 个坐标的完整潜向量
        ranges: 每个切片轴的 (lo, hi)
        resolution: 每轴节点数 R
        u_values: R × R × 2，u 在切片上的两个分量
        norm_values: R × R，u 的完整 d 维范数
    """

    def __init__(self, dims: Sequence[int], anchor, ranges: Sequence[Range], resolution: int,
                 u_values, norm_values):
        self.dims = (int(dims[0]), int(dims[1]))
        self.anchor = np.asarray(anchor, dtype=np.float64)
        self.ranges = tuple((float(lo), float(hi)) for lo, hi in ranges)
        self.resolution = int(resolution)
        self.u_values = np.asarray(u_values, dtype=np.float64)
        self.norm_values = np.asarray(norm_values, dtype=np.float64)

    @property
    def axes(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, self.resolution) for lo, hi in self.ranges]

    @property
    def spacing(self) -> Tuple[float, float]:
        return tuple((hi - lo) / (self.resolution - 1) for lo, hi in self.ranges)


class ScalarMap:
    """R × R 标量图，附带切片几何信息与奇异单元掩码"""

    def __init__(self, values, kind: MapKind, dims: Sequence[int], anchor, ranges: Sequence[Range],
                 singular=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.kind = MapKind(kind)
        self.dims = (int(dims[0]), int(dims[1]))
        self.anchor = np.asarray(anchor, dtype=np.float64)
        self.ranges = tuple((float(lo), float(hi)) for lo, hi in ranges)
        self.singular = (np.zeros(self.values.shape, dtype=bool) if singular is None
                         else np.asarray(singular, dtype=bool))

    @classmethod
    def from_grid(cls, grid: ResponseGrid, values, kind: MapKind, singular=None) -> "ScalarMap":
        return cls(values, kind, grid.dims, grid.anchor, grid.ranges, singular)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def axes(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, self.resolution) for lo, hi in self.ranges]

    @property
    def spacing(self) -> Tuple[float, float]:
        return tuple((hi - lo) / (self.resolution - 1) for lo, hi in self.ranges)

    def extrema(self) -> Tuple[float, float]:
        """非奇异单元的最小值与最大值（全部奇异时使用全部单元）"""
        valid = self.values[~self.singular] if np.any(~self.singular) else self.values.ravel()
        return float(valid.min()), float(valid.max())

    def nearest_node(self, point) -> Optional[Tuple[int, int]]:
        """切片坐标最近的节点下标；超出网格范围返回 None"""
        index = []
        for axis, (lo, hi), step in zip(range(2), self.ranges, self.spacing):
            value = float(point[axis])
            if not lo <= value <= hi:
                return None
            index.append(int(np.clip(np.rint((value - lo) / step), 0, self.resolution - 1)))
        return index[0], index[1]


def _normalize_ranges(value_range: Union[Range, Sequence[Range]]) -> Tuple[Range, Range]:
    value_range = np.asarray(value_range, dtype=np.float64)
    if value_range.shape == (2,):
        ranges = (tuple(value_range), tuple(value_range))
    elif value_range.shape == (2, 2):
        ranges = (tuple(value_range[0]), tuple(value_range[1]))
    else:
        raise UsageError(f"范围格式无效: {value_range.tolist()}")
    for lo, hi in ranges:
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise UsageError(f"范围必须满足 lo < hi: [{lo}, {hi}]")
    return ranges


def _grid_nodes(dims, anchor, ranges, resolution) -> np.ndarray:
    first = np.linspace(ranges[0][0], ranges[0][1], resolution)
    second = np.linspace(ranges[1][0], ranges[1][1], resolution)
    nodes = np.tile(anchor, (resolution, resolution, 1))
    nodes[:, :, dims[0]] = first[:, None]
    nodes[:, :, dims[1]] = second[None, :]
    return nodes


def eval_grid(model: VaeModel, dims: Sequence[int], anchor=None,
              value_range: Union[Range, Sequence[Range]] = (-3.0, 3.0), resolution: int = 64) -> ResponseGrid:
    """在切片网格的每个节点上计算响应场 u(z)

    Args:
        model: 模型
        dims: 两个不同的切片维度
        anchor: 其余坐标的取值，默认零向量
        value_range: (lo, hi) 或每轴各一个 (lo, hi)
        resolution: 每轴节点数，至少为3
    """
    d = model.latent_dim
    if len(dims) != 2 or dims[0] == dims[1] or not all(0 <= j < d for j in dims):
        raise UsageError(f"切片维度必须是 [0, {d}) 中两个不同的下标: {list(dims)}")
    if resolution < 3:
        raise UsageError(f"网格分辨率必须至少为3: {resolution}")
    anchor = np.zeros(d) if anchor is None else np.asarray(anchor, dtype=np.float64).reshape(-1)
    if anchor.shape[0] != d:
        raise DataError(f"锚点维度 {anchor.shape[0]} 与潜变量维度 {d} 不一致")
    ranges = _normalize_ranges(value_range)

    nodes = _grid_nodes(dims, anchor, ranges, resolution)
    field = response_field(model, nodes.reshape(-1, d)).reshape(resolution, resolution, d)
    u_values = field[:, :, list(dims)]
    if not np.all(np.isfinite(field)):
        raise DataError("响应场在网格上出现非有限值")
    logger.info(f"网格评估完成: dims={list(dims)}, R={resolution}, 范围={[list(r) for r in ranges]}")
    return ResponseGrid(dims, anchor, ranges, resolution, u_values, np.linalg.norm(field, axis=-1))


def _slice_divergence(vectors: np.ndarray, spacing: Tuple[float, float]) -> np.ndarray:
    # 内部节点中心差分，边界单侧差分
    return (np.gradient(vectors[:, :, 0], spacing[0], axis=0)
            + np.gradient(vectors[:, :, 1], spacing[1], axis=1))


def divergence(grid: ResponseGrid) -> ScalarMap:
    """只对两个切片分量做有限差分的散度 ∇·u"""
    return ScalarMap.from_grid(grid, _slice_divergence(grid.u_values, grid.spacing), MapKind.DIVERGENCE)


def mean_curvature(grid: ResponseGrid, eps: Optional[float] = None) -> ScalarMap:
    """H = −½ ∇·(u / max(‖u‖, eps))；‖u‖ < eps 的单元标记为奇异"""
    eps = settings.CURVATURE_EPS if eps is None else eps
    if eps <= 0:
        raise UsageError(f"eps 必须为正数: {eps}")
    normalized = grid.u_values / np.maximum(grid.norm_values, eps)[:, :, None]
    values = -0.5 * _slice_divergence(normalized, grid.spacing)
    singular = grid.norm_values < eps
    if np.any(singular):
        logger.warning(f"平均曲率图中有 {int(singular.sum())} 个奇异单元 (‖u‖ < {eps})")
    return ScalarMap.from_grid(grid, values, MapKind.MEAN_CURVATURE, singular)


def norm_map(grid: ResponseGrid) -> ScalarMap:
    """‖u‖，可视为到潜流形的无符号距离"""
    return ScalarMap.from_grid(grid, grid.norm_values, MapKind.NORM)


def _slice_points(points, dims) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return points[:, list(dims)]


def posterior_density(grid: Union[ResponseGrid, ScalarMap], points) -> ScalarMap:
    """聚合后验在网格单元上的直方图（每个点计入最近的节点，按总点数归一化）"""
    template = grid if isinstance(grid, ScalarMap) else norm_map(grid)
    counts = np.zeros((template.resolution, template.resolution))
    sliced = _slice_points(points, template.dims)
    for point in sliced:
        node = template.nearest_node(point)
        if node is not None:
            counts[node] += 1
    values = counts / max(len(sliced), 1)
    return ScalarMap(values, MapKind.DENSITY, template.dims, template.anchor, template.ranges)


def fraction_in_positive_curvature(curvature: ScalarMap, points) -> float:
    """落在 H > 0 的非奇异单元中的点的比例（网格外的点计为不满足）"""
    sliced = _slice_points(points, curvature.dims)
    if len(sliced) == 0:
        raise DataError("至少需要一个点")
    hits = 0
    for point in sliced:
        node = curvature.nearest_node(point)
        if node is not None and not curvature.singular[node] and curvature.values[node] > 0:
            hits += 1
    return hits / len(sliced)


def negative_fraction(scalar_map: ScalarMap, window: Range = (-2.0, 2.0)) -> float:
    """窗口 [lo, hi]² 内取值为负的节点比例"""
    first, second = scalar_map.axes
    inside = ((first >= window[0]) & (first <= window[1]))[:, None] & \
             ((second >= window[0]) & (second <= window[1]))[None, :]
    if not np.any(inside):
        raise DataError(f"窗口 {list(window)} 内没有网格节点")
    return float(np.mean(scalar_map.values[inside] < 0))


def _ensure_parent(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def _format(value: float) -> str:
    return format(float(value), ".17g")


def export_map(scalar_map: ScalarMap, path: str, fmt: MapFormat = MapFormat.CSV) -> None:
    """导出标量图

    CSV: 以 # 开头的元数据行（种类、维度、范围、锚点、极值、奇异单元），
    随后 R 行 R 列，第 i 行对应第一个切片维度的第 i 个节点。
    PGM: P5 二进制 8 位灰度，[min, max] 仿射映射到 [0, 255]，奇异单元为 0，
    第 0 行对应第二个切片维度的最大坐标。
    """
    fmt = MapFormat(fmt)
    try:
        _ensure_parent(path)
        if fmt is MapFormat.CSV:
            _write_map_csv(scalar_map, path)
        else:
            _write_pgm(scalar_map, path)
    except OSError as e:
        raise DataError(f"无法写入 {path}: {e}") from e
    logger.debug(f"已导出 {scalar_map.kind.value} 图: {path}")


def _write_map_csv(scalar_map: ScalarMap, path: str) -> None:
    minimum, maximum = scalar_map.extrema()
    singular = np.flatnonzero(scalar_map.singular.ravel())
    lines = [
        f"# kind={scalar_map.kind.value}",
        f"# dims={scalar_map.dims[0]},{scalar_map.dims[1]}",
        f"# range1={_format(scalar_map.ranges[0][0])},{_format(scalar_map.ranges[0][1])}",
        f"# range2={_format(scalar_map.ranges[1][0])},{_format(scalar_map.ranges[1][1])}",
        f"# resolution={scalar_map.resolution}",
        f"# anchor={','.join(_format(v) for v in scalar_map.anchor)}",
        f"# min={_format(minimum)}",
        f"# max={_format(maximum)}",
        f"# singular={','.join(str(int(i)) for i in singular)}",
    ]
    for row in scalar_map.values:
        lines.append(",".join(_format(v) for v in row))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _write_pgm(scalar_map: ScalarMap, path: str) -> None:
    minimum, maximum = scalar_map.extrema()
    if maximum > minimum:
        scaled = (scalar_map.values - minimum) / (maximum - minimum) * 255.0
    else:
        scaled = np.zeros_like(scalar_map.values)
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    pixels[scalar_map.singular] = 0
    image = pixels.T[::-1]
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + image.tobytes())


def read_map_csv(path: str) -> ScalarMap:
    """读取 export_map 写出的 CSV 标量图"""
    meta = {}
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, value = line[1:].strip().partition("=")
                    meta[key] = value
                    continue
                try:
                    rows.append([float(v) for v in line.split(",")])
                except ValueError as e:
                    raise DataError(f"{path}:{line_no}: 无法解析数值") from e
    except OSError as e:
        raise DataError(f"无法读取 {path}: {e}") from e

    try:
        values = np.asarray(rows, dtype=np.float64)
        dims = [int(v) for v in meta["dims"].split(",")]
        ranges = [tuple(float(v) for v in meta[key].split(",")) for key in ("range1", "range2")]
        anchor = [float(v) for v in meta["anchor"].split(",")] if meta.get("anchor") else []
        kind = MapKind(meta["kind"])
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: 元数据缺失或无效: {e}") from e
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise DataError(f"{path}: 标量图必须是方阵，实际形状 {values.shape}")
    singular = np.zeros(values.size, dtype=bool)
    if meta.get("singular"):
        singular[[int(i) for i in meta["singular"].split(",")]] = True
    return ScalarMap(values, kind, dims, anchor, ranges, singular.reshape(values.shape))


def field_table(grid: ResponseGrid) -> np.ndarray:
    """箭头图用的场表：每个节点一行 (z1, z2, u1, u2, h1, h2, ‖u‖)"""
    first, second = grid.axes
    z1, z2 = np.meshgrid(first, second, indexing="ij")
    u1 = grid.u_values[:, :, 0]
    u2 = grid.u_values[:, :, 1]
    columns = [z1, z2, u1, u2, z1 + u1, z2 + u2, grid.norm_values]
    return np.stack([c.ravel() for c in columns], axis=1)


def write_field_csv(path: str, grid: ResponseGrid) -> None:
    names = ["z1", "z2", "u1", "u2", "h1", "h2", "norm"]
    try:
        _ensure_parent(path)
        with open(path, "w", encoding="utf-8") as f:
            f.write(",".join(names) + "\n")
            for row in field_table(grid):
                f.write(",".join(_format(v) for v in row) + "\n")
    except OSError as e:
        raise DataError(f"无法写入 {path}: {e}") from e
