import logging
from typing import Optional, Tuple

import numpy as np
from fastapi import APIRouter, Depends, HTTPException

from app import __version__
from app.core.config import settings
from app.models.api import (
    DecodeResponse,
    EncodeResponse,
    PointBatch,
    ResponseFieldResponse,
    ResponseSamplesRequest,
    ResponseSamplesResponse,
)
from app.models.checkpoint import Checkpoint
from latent_response.error_handler import LatentResponseError
from latent_response.response import latent_response, sample_response_distribution
from latent_response.vae import VaeModel, decode, encode, load_checkpoint

# 配置日志
logger = logging.getLogger(__name__)

# 创建API路由器
api_router = APIRouter()

# 已加载的检查点：(路径, 模型, 元数据)
_loaded: Optional[Tuple[str, VaeModel, Checkpoint]] = None


def get_model() -> Tuple[VaeModel, Checkpoint]:
    """按 CHECKPOINT_PATH 懒加载模型，路径变化时重新加载"""
    global _loaded
    path = settings.CHECKPOINT_PATH
    if not path:
        raise HTTPException(status_code=503, detail="未配置检查点 (CHECKPOINT_PATH)")
    if _loaded is None or _loaded[0] != path:
        try:
            model, checkpoint = load_checkpoint(path)
        except LatentResponseError as e:
            logger.error(f"加载检查点失败: {str(e)}")
            raise HTTPException(status_code=503, detail=str(e))
        _loaded = (path, model, checkpoint)
        logger.info(f"已加载检查点 {path}")
    return _loaded[1], _loaded[2]


def _check_width(points, expected: int, what: str) -> np.ndarray:
    array = np.asarray(points, dtype=np.float64)
    if array.shape[-1] != expected:
        raise HTTPException(status_code=422, detail=f"{what}维度 {array.shape[-1]} 与模型不一致，应为 {expected}")
    return array


# 健康检查端点
@api_router.get("/health")
async def health_check():
    """健康检查端点"""
    return {"status": "ok", "version": __version__}


# 服务信息端点
@api_router.get("/info")
async def service_info():
    """获取服务信息与当前检查点的元数据"""
    info = {
        "name": settings.PROJECT_NAME,
        "version": __version__,
        "description": "VAE 潜变量响应分析服务",
        "checkpoint": settings.CHECKPOINT_PATH or None,
    }
    if settings.CHECKPOINT_PATH:
        _, checkpoint = get_model()
        info.update({
            "latent_dim": checkpoint.latent_dim,
            "obs_dim": checkpoint.obs_dim,
            "beta": checkpoint.beta,
            "hidden": checkpoint.hidden,
            "steps_trained": checkpoint.steps_trained,
        })
    return info


@api_router.post("/encode", response_model=EncodeResponse)
async def encode_points(batch: PointBatch, loaded=Depends(get_model)):
    """观测 → 后验均值与对数标准差"""
    model, _ = loaded
    posterior = encode(model, _check_width(batch.points, model.obs_dim, "观测"))
    return EncodeResponse(mu=posterior.mu.tolist(), log_sigma=posterior.log_sigma.tolist())


@api_router.post("/decode", response_model=DecodeResponse)
async def decode_points(batch: PointBatch, loaded=Depends(get_model)):
    model, _ = loaded
    return DecodeResponse(observations=decode(model, _check_width(batch.points, model.latent_dim, "潜向量")).tolist())


@api_router.post("/response", response_model=ResponseFieldResponse)
async def response_points(batch: PointBatch, loaded=Depends(get_model)):
    """潜向量批量的响应 h(z) 与响应场 u(z) = h(z) − z"""
    model, _ = loaded
    z = _check_width(batch.points, model.latent_dim, "潜向量")
    responses = latent_response(model, z)
    field = responses - z
    return ResponseFieldResponse(responses=responses.tolist(), field=field.tolist(),
                                 norms=np.linalg.norm(field, axis=1).tolist())


@api_router.post("/response/samples", response_model=ResponseSamplesResponse)
async def response_samples(request: ResponseSamplesRequest, loaded=Depends(get_model)):
    """响应分布 r(Ẑ|Z=z) 的样本均值与方差"""
    model, _ = loaded
    z = _check_width(request.z, model.latent_dim, "潜向量")
    samples = sample_response_distribution(model, z, request.n, seed=request.seed)
    return ResponseSamplesResponse(base=samples.base.tolist(), mean=samples.mean.tolist(),
                                   variance=samples.variance.tolist(), n=request.n)
