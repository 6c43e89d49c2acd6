import configparser
import json
import logging
import typing
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ValidationError

from app.models.config import COMMAND_MODELS
from latent_response.error_handler import UsageError

# 配置日志
logger = logging.getLogger(__name__)


class ConfigValidationResult:
    """配置验证结果类"""

    def __init__(self, is_valid: bool, errors: Optional[List[str]] = None, warnings: Optional[List[str]] = None):
        self.is_valid = is_valid
        self.errors = errors or []
        self.warnings = warnings or []

    def __bool__(self) -> bool:
        """允许直接在条件表达式中使用"""
        return self.is_valid


def _is_list_field(model: typing.Type[BaseModel], name: str) -> bool:
    field = model.__fields__[name]
    return typing.get_origin(field.outer_type_) in (list, List)


class ConfigValidator:
    """命令配置文件验证器

    配置文件为 INI 格式，每个命令一个小节（[train]、[matrix] ...），
    每行 key = value；列表值用逗号分隔。
    """

    def __init__(self):
        self.config_models = COMMAND_MODELS

    def load_file(self, path: str) -> Dict[str, Dict[str, str]]:
        """读取配置文件

        Raises:
            UsageError: 文件不存在或格式错误
        """
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as e:
            raise UsageError(f"无法读取配置文件 {path}: {e}") from e
        except configparser.Error as e:
            raise UsageError(f"配置文件格式错误 {path}: {e}") from e
        return {section: dict(parser.items(section)) for section in parser.sections()}

    def coerce_section(self, command: str, raw: Dict[str, str]) -> Dict[str, Any]:
        """把字符串值转换为模型字段可接受的形式（列表拆分、空值为 None），未知键原样保留"""
        model = self.config_models[command]
        values = {}
        for key, value in raw.items():
            text = value.strip()
            if key in model.__fields__ and _is_list_field(model, key):
                values[key] = [item.strip() for item in text.split(",") if item.strip()]
            else:
                values[key] = text if text else None
        return values

    def validate_config(self, command: str, config: Dict[str, Any], partial: bool = False) -> ConfigValidationResult:
        """验证配置有效性

        Args:
            command: 命令名称
            config: 配置数据
            partial: 为 True 时忽略缺失的必填字段（配置文件只提供部分值，其余来自命令行）

        Returns:
            验证结果
        """
        logger.info(f"正在验证 {command} 命令配置")

        if command not in self.config_models:
            return ConfigValidationResult(False, [f"不支持的命令: {command}"])

        config_model = self.config_models[command]
        warnings = [f"未知的配置项 {key} 将被忽略" for key in config if key not in config_model.__fields__]

        try:
            config_model(**{k: v for k, v in config.items() if k in config_model.__fields__})
            return ConfigValidationResult(True, [], warnings)
        except ValidationError as e:
            errors = [f"{error['loc'][0]}: {error['msg']}" for error in json.loads(e.json())
                      if not (partial and error["type"] == "value_error.missing")]
            return ConfigValidationResult(not errors, errors, warnings)

    def section_values(self, path: str, command: str) -> Dict[str, Any]:
        """读取并验证某个命令的小节，返回只含已知字段的值

        Raises:
            UsageError: 小节验证失败
        """
        sections = self.load_file(path)
        if command not in sections:
            return {}
        values = self.coerce_section(command, sections[command])
        result = self.validate_config(command, values, partial=True)
        for warning in result.warnings:
            logger.warning(f"{path} [{command}]: {warning}")
        if not result:
            raise UsageError(f"配置文件 {path} 的 [{command}] 小节无效: {'; '.join(result.errors)}")
        return {k: v for k, v in values.items() if k in self.config_models[command].__fields__}
