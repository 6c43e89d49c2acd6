import json
import logging
import os
import traceback
from datetime import datetime
from functools import wraps
from typing import Any, Callable, Dict, Generic, List, Optional, TypeVar

# 配置日志
logger = logging.getLogger(__name__)

# 定义泛型类型变量
T = TypeVar("T")

# 退出码
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class LatentResponseError(Exception):
    """所有领域错误的基类，携带命令行退出码"""

    exit_code = EXIT_DATA

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.context = context or {}


class UsageError(LatentResponseError):
    """参数或配置错误"""

    exit_code = EXIT_USAGE


class DataError(LatentResponseError):
    """数据错误：维度不匹配、文件格式错误、缺少标签、空分层等"""

    exit_code = EXIT_DATA


class ModelError(LatentResponseError):
    """模型错误：检查点格式错误、记录带过期等"""

    exit_code = EXIT_DATA


class NumericalError(LatentResponseError):
    """数值错误：梯度、损失或雅可比出现非有限值"""

    exit_code = EXIT_NUMERICAL


class TrainingDivergedError(NumericalError):
    """训练发散，保留已记录的损失轨迹"""

    def __init__(self, message: str, step: int, trace: List[float]):
        super().__init__(message, {"step": step})
        self.step = step
        self.trace = list(trace)


class OperationResult(Generic[T]):
    """操作结果封装类，用于统一处理命令结果和错误"""

    def __init__(self, success: bool, data: Optional[T] = None, error: Optional[str] = None,
                 exit_code: int = EXIT_OK):
        self.success = success
        self.data = data
        self.error = error
        self.exit_code = exit_code
        self.timestamp = datetime.now()

    @classmethod
    def success_result(cls, data: Optional[T] = None) -> "OperationResult[T]":
        """创建成功结果"""
        return cls(True, data, None, EXIT_OK)

    @classmethod
    def error_result(cls, error: str, exit_code: int = EXIT_DATA, data: Optional[T] = None) -> "OperationResult[T]":
        """创建错误结果"""
        return cls(False, data, error, exit_code)


class ErrorTracker:
    """错误跟踪器，用于记录和查询命令失败信息"""

    def __init__(self, log_dir: str = "logs/errors"):
        self.log_dir = log_dir

    def log_error(self, command: str, error: Exception, context: Optional[Dict[str, Any]] = None) -> str:
        """记录错误信息

        Args:
            command: 命令名称
            error: 异常对象
            context: 上下文信息

        Returns:
            错误日志文件路径
        """
        os.makedirs(self.log_dir, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d%H%M%S%f")
        error_id = f"{command}_{timestamp}"
        log_file = os.path.join(self.log_dir, f"{error_id}.json")

        error_data = {
            "error_id": error_id,
            "command": command,
            "timestamp": datetime.now().isoformat(),
            "error_type": type(error).__name__,
            "error_message": str(error),
            "exit_code": exit_code_for(error),
            "traceback": traceback.format_exc(),
            "context": _jsonable({**getattr(error, "context", {}), **(context or {})}),
        }

        with open(log_file, "w", encoding="utf-8") as f:
            json.dump(error_data, f, indent=2, ensure_ascii=False)

        logger.error(f"错误已记录到 {log_file}: {str(error)}")
        return log_file


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, LatentResponseError):
        return error.exit_code
    if isinstance(error, FloatingPointError):
        return EXIT_NUMERICAL
    return EXIT_DATA


class CommandRunner:
    """命令执行器：把异常转换为 OperationResult 和退出码"""

    def __init__(self, error_tracker: Optional[ErrorTracker] = None):
        self.error_tracker = error_tracker

    def guarded(self, command: str):
        """创建命令保护装饰器

        Args:
            command: 命令名称

        Returns:
            装饰器函数，被装饰函数的返回值放入 OperationResult.data
        """
        def decorator(func: Callable[..., T]) -> Callable[..., OperationResult[T]]:
            @wraps(func)
            def wrapper(*args, **kwargs) -> OperationResult[T]:
                try:
                    return OperationResult.success_result(func(*args, **kwargs))
                except (LatentResponseError, FloatingPointError, OSError) as e:
                    code = exit_code_for(e)
                    logger.error(f"命令 {command} 失败（退出码 {code}）: {str(e)}")
                    if self.error_tracker is not None:
                        self.error_tracker.log_error(command, e)
                    return OperationResult.error_result(str(e), code)
            return wrapper
        return decorator


def _jsonable(value: Any) -> Any:
    """把上下文转换为可写入JSON的结构"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)
