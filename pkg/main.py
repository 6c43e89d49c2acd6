import sys

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from starlette.responses import RedirectResponse
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()

from app import __version__
from app.core.config import settings
from app.api.v1.api import api_router


def create_app() -> FastAPI:
    """创建FastAPI应用实例"""
    application = FastAPI(
        title=settings.PROJECT_NAME,
        description="加载训练好的 VAE 检查点，提供编码、解码与潜变量响应查询",
        version=__version__,
    )

    # 配置CORS
    application.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    # 根路由重定向到API文档
    @application.get("/", include_in_schema=False)
    async def root():
        return RedirectResponse(url="/docs")

    # 注册API路由
    application.include_router(api_router, prefix=settings.API_V1_STR)
    return application


app = create_app()

# 命令行入口：python main.py <命令> ...
if __name__ == "__main__":
    from latent_response.cli import main

    sys.exit(main())
