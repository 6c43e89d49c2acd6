from pydantic import BaseSettings, validator
import os
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()


class Settings(BaseSettings):
    """应用配置类，使用pydantic进行环境变量验证"""

    PROJECT_NAME: str = "潜变量响应分析工具"
    API_V1_STR: str = "/api/v1"

    # 服务配置
    HOST: str = os.getenv("HOST", "0.0.0.0")
    PORT: int = int(os.getenv("PORT", "8000"))
    CHECKPOINT_PATH: str = os.getenv("CHECKPOINT_PATH", "")

    # 输出配置
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "runs")

    # 数值配置
    FD_STEP: float = float(os.getenv("FD_STEP", "1e-4"))
    CURVATURE_EPS: float = float(os.getenv("CURVATURE_EPS", "1e-3"))
    MC_BLOCK_SIZE: int = int(os.getenv("MC_BLOCK_SIZE", "256"))
    MC_WORKERS: int = int(os.getenv("MC_WORKERS", "1"))

    # 日志配置
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE: str = os.getenv("LOG_FILE", "logs/latent_response.log")
    ERROR_LOG_DIR: str = os.getenv("ERROR_LOG_DIR", "logs/errors")

    @validator("FD_STEP", "CURVATURE_EPS")
    def validate_positive(cls, v):
        """数值步长必须为正"""
        if v <= 0:
            raise ValueError(f"必须为正数: {v}")
        return v

    @validator("MC_BLOCK_SIZE", "MC_WORKERS")
    def validate_count(cls, v):
        if v < 1:
            raise ValueError(f"必须至少为1: {v}")
        return v

    @validator("LOG_LEVEL")
    def validate_log_level(cls, v):
        """验证日志级别是否有效"""
        allowed_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in allowed_levels:
            raise ValueError(f"无效的日志级别: {v}，有效的级别: {allowed_levels}")
        return v.upper()

    class Config:
        case_sensitive = True


# 创建全局设置对象
settings = Settings()
