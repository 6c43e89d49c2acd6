from typing import List

from pydantic import BaseModel, validator


class PointBatch(BaseModel):
    """向量批量请求"""
    points: List[List[float]]

    @validator("points")
    def validate_points(cls, v):
        """所有向量必须非空且长度一致"""
        if not v:
            raise ValueError("至少需要一个向量")
        if any(len(p) != len(v[0]) for p in v) or not v[0]:
            raise ValueError("所有向量长度必须一致且非空")
        return v


class EncodeResponse(BaseModel):
    mu: List[List[float]]
    log_sigma: List[List[float]]


class DecodeResponse(BaseModel):
    observations: List[List[float]]


class ResponseFieldResponse(BaseModel):
    responses: List[List[float]]
    field: List[List[float]]
    norms: List[float]


class ResponseSamplesRequest(BaseModel):
    z: List[float]
    n: int = 100
    seed: int = 0

    @validator("n")
    def validate_n(cls, v):
        if not 1 <= v <= 100000:
            raise ValueError(f"抽样数必须位于 [1, 100000]: {v}")
        return v


class ResponseSamplesResponse(BaseModel):
    base: List[float]
    mean: List[float]
    variance: List[float]
    n: int
