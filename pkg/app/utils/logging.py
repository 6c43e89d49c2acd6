import logging
import os
from typing import Optional

from app.core.config import Settings, settings as default_settings

_CONFIGURED = False

LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"


def setup_logging(settings: Optional[Settings] = None, level: Optional[str] = None) -> None:
    """根据配置初始化根日志器（只执行一次）

    Args:
        settings: 应用配置，默认使用全局配置
        level: 覆盖配置中的日志级别
    """
    global _CONFIGURED
    if _CONFIGURED:
        return

    settings = settings or default_settings
    root = logging.getLogger()
    root.setLevel((level or settings.LOG_LEVEL).upper())

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(console)

    # LOG_FILE 为空表示只输出到控制台
    if settings.LOG_FILE:
        log_dir = os.path.dirname(settings.LOG_FILE)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(settings.LOG_FILE, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)

    _CONFIGURED = True
