from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, validator


class InterventionSource(str, Enum):
    """干预值的采样来源"""
    PRIOR = "prior"
    AGGREGATE_POSTERIOR = "aggregate_posterior"


class MapFormat(str, Enum):
    CSV = "csv"
    PGM = "pgm"


class HelixConfig(BaseModel):
    """双螺旋数据集配置"""
    a1: float = 1.0
    a2: float = 1.0
    a3: float = 1.0
    omega: float = 1.0
    sigma: float = 0.1
    n: int = 1024
    seed: int = 0

    @validator("sigma")
    def validate_sigma(cls, v):
        if v < 0:
            raise ValueError(f"噪声标准差不能为负: {v}")
        return v

    @validator("n")
    def validate_n(cls, v):
        if v <= 0:
            raise ValueError(f"样本数必须为正: {v}")
        return v


class FactorConfig(BaseModel):
    """离散因子数据集配置：每个因子水平映射为固定随机编码，再经随机两层网络映射到观测空间"""
    cardinalities: List[int] = [4, 4, 4]
    obs_dim: int = 16
    code_dim: int = 4
    hidden_dim: int = 32
    embed_seed: int = 0
    sigma: float = 0.0
    repeats: int = 1
    seed: int = 0

    @validator("cardinalities")
    def validate_cardinalities(cls, v):
        """至少两个因子，每个因子至少两个水平"""
        if len(v) < 2:
            raise ValueError(f"因子数量必须至少为2: {v}")
        if any(c < 2 for c in v):
            raise ValueError(f"每个因子的水平数必须至少为2: {v}")
        return v

    @validator("obs_dim")
    def validate_obs_dim(cls, v):
        if not 1 <= v <= 64:
            raise ValueError(f"观测维度必须位于 [1, 64]: {v}")
        return v

    @validator("code_dim", "hidden_dim", "repeats")
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError(f"必须至少为1: {v}")
        return v

    @validator("sigma")
    def validate_sigma(cls, v):
        if v < 0:
            raise ValueError(f"噪声标准差不能为负: {v}")
        return v

    @property
    def factor_count(self) -> int:
        return len(self.cardinalities)


class TrainConfig(BaseModel):
    """VAE 训练配置"""
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    beta: float = 1.0
    seed: int = 0
    latent_dim: int = 2
    hidden: List[int] = [32, 32, 32, 32]
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    log_every: int = 500

    @validator("steps")
    def validate_steps(cls, v):
        # 0 步只导出初始化结果
        if v < 0:
            raise ValueError(f"训练步数不能为负: {v}")
        return v

    @validator("batch_size", "latent_dim", "log_every")
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError(f"必须至少为1: {v}")
        return v

    @validator("lr")
    def validate_lr(cls, v):
        if v <= 0:
            raise ValueError(f"学习率必须为正: {v}")
        return v

    @validator("beta")
    def validate_beta(cls, v):
        if v < 0:
            raise ValueError(f"β 不能为负: {v}")
        return v

    @validator("hidden")
    def validate_hidden(cls, v):
        if any(h < 1 for h in v):
            raise ValueError(f"隐藏层宽度必须为正: {v}")
        return v


# 预设配置：双螺旋实验
PRESETS = {
    "helix": {
        "latent_dim": 2,
        "hidden": [32, 32, 32, 32],
        "beta": 0.05,
        "steps": 5000,
        "batch_size": 256,
        "lr": 1e-3,
    },
}


class CommandConfig(BaseModel):
    """所有命令共享的字段"""
    seed: int = 0
    out: Optional[str] = None

    @validator("seed")
    def validate_seed(cls, v):
        if v < 0:
            raise ValueError(f"随机种子必须为非负整数: {v}")
        return v


class GenDataCommand(CommandConfig):
    kind: str = "helix"
    n: int = 1024
    sigma: float = 0.1
    a1: float = 1.0
    a2: float = 1.0
    a3: float = 1.0
    omega: float = 1.0
    cardinalities: List[int] = [4, 4, 4]
    obs_dim: int = 16
    code_dim: int = 4
    hidden_dim: int = 32
    embed_seed: Optional[int] = None
    repeats: int = 1

    @validator("kind")
    def validate_kind(cls, v):
        allowed = ["helix", "factors"]
        if v.lower() not in allowed:
            raise ValueError(f"不支持的数据集类型: {v}，支持的类型: {allowed}")
        return v.lower()

    @validator("n")
    def validate_n(cls, v):
        if v <= 0:
            raise ValueError(f"样本数必须为正: {v}")
        return v

    @validator("sigma")
    def validate_sigma(cls, v):
        if v < 0:
            raise ValueError(f"噪声标准差不能为负: {v}")
        return v

    def helix_config(self) -> HelixConfig:
        return HelixConfig(a1=self.a1, a2=self.a2, a3=self.a3, omega=self.omega,
                           sigma=self.sigma, n=self.n, seed=self.seed)

    def factor_config(self) -> FactorConfig:
        embed_seed = self.seed if self.embed_seed is None else self.embed_seed
        return FactorConfig(cardinalities=self.cardinalities, obs_dim=self.obs_dim,
                            code_dim=self.code_dim, hidden_dim=self.hidden_dim,
                            embed_seed=embed_seed, sigma=self.sigma, repeats=self.repeats,
                            seed=self.seed)


class TrainCommand(CommandConfig):
    data: str
    preset: Optional[str] = None
    resume: Optional[str] = None
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    beta: float = 1.0
    latent_dim: int = 2
    hidden: List[int] = [32, 32, 32, 32]
    log_every: int = 500

    @validator("preset")
    def validate_preset(cls, v):
        if v is not None and v not in PRESETS:
            raise ValueError(f"未知的预设: {v}，可用的预设: {sorted(PRESETS)}")
        return v

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr, beta=self.beta,
                           seed=self.seed, latent_dim=self.latent_dim, hidden=self.hidden,
                           log_every=self.log_every)


class MatrixCommand(CommandConfig):
    checkpoint: str
    data: Optional[str] = None
    n_samples: int = 10000
    source: InterventionSource = InterventionSource.PRIOR

    @validator("n_samples")
    def validate_samples(cls, v):
        if v < 1:
            raise ValueError(f"抽样数必须至少为1: {v}")
        return v


class CondMatrixCommand(CommandConfig):
    checkpoint: str
    data: str
    n_samples: int = 10000

    @validator("n_samples")
    def validate_samples(cls, v):
        if v < 1:
            raise ValueError(f"抽样数必须至少为1: {v}")
        return v


class ResponsibilityCommand(CommandConfig):
    checkpoint: str
    data: str
    alpha: float = 0.01

    @validator("alpha")
    def validate_alpha(cls, v):
        if v <= 0:
            raise ValueError(f"正则化系数必须为正: {v}")
        return v


class MapCommand(CommandConfig):
    checkpoint: str
    dims: List[int] = [0, 1]
    range: List[float] = [-3.0, 3.0]
    res: int = 64
    anchor: Optional[List[float]] = None
    anchor_row: Optional[int] = None
    data: Optional[str] = None
    eps: float = 1e-3

    @validator("dims")
    def validate_dims(cls, v):
        if len(v) != 2 or v[0] == v[1] or min(v) < 0:
            raise ValueError(f"切片维度必须是两个不同的非负下标: {v}")
        return v

    @validator("range")
    def validate_range(cls, v):
        if len(v) != 2 or not v[0] < v[1]:
            raise ValueError(f"范围必须满足 lo < hi: {v}")
        return v

    @validator("res")
    def validate_res(cls, v):
        if v < 3:
            raise ValueError(f"网格分辨率必须至少为3: {v}")
        return v

    @validator("eps")
    def validate_eps(cls, v):
        if v <= 0:
            raise ValueError(f"eps 必须为正: {v}")
        return v


class InterpCommand(MapCommand):
    start: Optional[List[float]] = None
    end: Optional[List[float]] = None
    start_row: Optional[int] = None
    end_row: Optional[int] = None
    gamma: float = 2.0
    waypoints: int = 64
    curvature_map: Optional[str] = None

    @validator("gamma")
    def validate_gamma(cls, v):
        if v < 0:
            raise ValueError(f"γ 不能为负: {v}")
        return v

    @validator("waypoints")
    def validate_waypoints(cls, v):
        if v < 2:
            raise ValueError(f"直线路径至少需要2个点: {v}")
        return v


class DiagnoseCommand(CommandConfig):
    checkpoint: str
    data: str
    row: int = 0
    noise_scale: float = 0.2

    @validator("noise_scale")
    def validate_noise(cls, v):
        if v < 0:
            raise ValueError(f"噪声尺度不能为负: {v}")
        return v


class SweepCommand(CommandConfig):
    data: str
    betas: List[float] = [0.5, 1.0, 2.0, 4.0]
    seeds: List[int] = [0, 1, 2]
    latent_dim: int = 8
    hidden: List[int] = [32, 32]
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    n_samples: int = 2000

    @validator("betas")
    def validate_betas(cls, v):
        if len(v) < 2 or any(b < 0 for b in v):
            raise ValueError(f"β 网格至少需要两个非负值: {v}")
        return v

    @validator("seeds")
    def validate_seeds(cls, v):
        if not v or any(s < 0 for s in v):
            raise ValueError(f"种子列表必须非空且非负: {v}")
        return v


class ServeCommand(CommandConfig):
    checkpoint: Optional[str] = None
    host: Optional[str] = None
    port: Optional[int] = None


# 命令名称到配置模型的映射
COMMAND_MODELS = {
    "gen-data": GenDataCommand,
    "train": TrainCommand,
    "matrix": MatrixCommand,
    "cond-matrix": CondMatrixCommand,
    "cds": CondMatrixCommand,
    "responsibility": ResponsibilityCommand,
    "map": MapCommand,
    "field": MapCommand,
    "interp": InterpCommand,
    "diagnose": DiagnoseCommand,
    "sweep": SweepCommand,
    "serve": ServeCommand,
}
