from typing import Any, Dict, List, Optional

from pydantic import BaseModel, validator

from latent_response.nn_core import Activation

FORMAT_VERSION = 1


class LayerRecord(BaseModel):
    """单层参数，权重按行优先的嵌套数组保存"""
    weight: List[List[float]]
    bias: List[float]
    activation: Activation

    @validator("bias")
    def validate_bias(cls, v, values):
        weight = values.get("weight")
        if weight is not None and len(v) != len(weight):
            raise ValueError(f"偏置长度 {len(v)} 与权重行数 {len(weight)} 不一致")
        return v

    @validator("weight")
    def validate_weight(cls, v):
        if not v or any(len(row) != len(v[0]) for row in v):
            raise ValueError("权重必须是非空的矩形数组")
        return v


class NetworkRecord(BaseModel):
    layers: List[LayerRecord]

    @validator("layers")
    def validate_layers(cls, v):
        if not v:
            raise ValueError("网络至少需要一层")
        for k in range(len(v) - 1):
            if len(v[k].weight) != len(v[k + 1].weight[0]):
                raise ValueError(f"第 {k} 层与第 {k + 1} 层维度不匹配")
        return v


class Checkpoint(BaseModel):
    """VAE 检查点：元数据与全部参数"""
    format_version: int = FORMAT_VERSION
    code_version: str
    latent_dim: int
    obs_dim: int
    beta: float
    seed: int
    hidden: List[int]
    activations: List[Activation]
    obs_shift: List[float]
    obs_scale: List[float]
    steps_trained: int = 0
    final_loss: Optional[float] = None
    train: Optional[Dict[str, Any]] = None
    encoder: NetworkRecord
    decoder: NetworkRecord

    @validator("format_version")
    def validate_format(cls, v):
        if v != FORMAT_VERSION:
            raise ValueError(f"不支持的检查点格式版本: {v}")
        return v

    @validator("encoder")
    def validate_encoder(cls, v, values):
        latent_dim = values.get("latent_dim")
        obs_dim = values.get("obs_dim")
        if latent_dim is not None and len(v.layers[-1].weight) != 2 * latent_dim:
            raise ValueError(f"编码器输出维度必须为 2 × latent_dim = {2 * latent_dim}")
        if obs_dim is not None and len(v.layers[0].weight[0]) != obs_dim:
            raise ValueError(f"编码器输入维度必须为 obs_dim = {obs_dim}")
        return v

    @validator("decoder")
    def validate_decoder(cls, v, values):
        latent_dim = values.get("latent_dim")
        obs_dim = values.get("obs_dim")
        if latent_dim is not None and len(v.layers[0].weight[0]) != latent_dim:
            raise ValueError(f"解码器输入维度必须为 latent_dim = {latent_dim}")
        if obs_dim is not None and len(v.layers[-1].weight) != obs_dim:
            raise ValueError(f"解码器输出维度必须为 obs_dim = {obs_dim}")
        return v
