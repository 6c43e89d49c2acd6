from typing import Any, Dict, List, Optional

from pydantic import BaseModel


class Manifest(BaseModel):
    """命令清单：重放清单即可逐字节复现输出"""
    command: str
    code_version: str
    seed: int
    config: Dict[str, Any]
    settings: Dict[str, Any] = {}


class MatrixReport(BaseModel):
    """响应矩阵、条件响应矩阵或责任矩阵的报告"""
    kind: str
    row_labels: List[str]
    col_labels: List[str]
    entries: List[List[float]]
    seed: int
    n_samples: Optional[int] = None
    source: Optional[str] = None
    sample_counts: Optional[List[List[int]]] = None
    collapsed_dims: Optional[List[int]] = None
    notes: Optional[str] = None


class CdsReport(BaseModel):
    cds: float
    cds_raw: float
    factor_count: int
    dropped_columns: List[int]
    matrix: MatrixReport


class ResponsibilityReport(BaseModel):
    score: Optional[float]
    score_raw: Optional[float]
    degenerate_factors: List[int]
    alpha: float
    matrix: MatrixReport


class MapStats(BaseModel):
    kind: str
    minimum: float
    maximum: float
    singular_cells: int


class MapReport(BaseModel):
    dims: List[int]
    anchor: List[float]
    ranges: List[List[float]]
    resolution: int
    eps: float
    maps: List[MapStats]
    negative_divergence_fraction: Optional[float] = None
    posterior_in_positive_curvature: Optional[float] = None


class PathReport(BaseModel):
    method: str
    waypoint_count: int
    cost: float
    latent_length: float
    ambient_length: float
    max_jump: float


class InterpReport(BaseModel):
    start: List[float]
    end: List[float]
    gamma: float
    straight: PathReport
    guided: PathReport


class ExpansionReportModel(BaseModel):
    row: int
    noise_scale: float
    s: List[float]
    s_hat: List[float]
    term1: List[float]
    term2: List[float]
    term3: List[float]
    term2_linear: List[float]
    residual: List[float]
    residual_norm: float
    epsilon: List[float]
    epsilon_norm: float
    residual_norm_half: float
    residual_ratio: Optional[float]


class SweepRow(BaseModel):
    beta: float
    seed: int
    cds: float
    cds_raw: float
    final_loss: float


class SweepReport(BaseModel):
    rows: List[SweepRow]
    mean_cds: Dict[str, float]
    spearman_rho: Optional[float]
    spearman_pvalue: Optional[float]


class TrainReport(BaseModel):
    steps_trained: int
    final_loss: Optional[float]
    reconstruction_mse: float
    latent_dim: int
    beta: float


class DatasetReport(BaseModel):
    kind: str
    n: int
    obs_dim: int
    factor_names: List[str]
    factor_cardinalities: List[Optional[int]]
