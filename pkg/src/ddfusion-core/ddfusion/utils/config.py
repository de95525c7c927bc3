from pathlib import Path

from tomlkit import TOMLDocument, parse
from tomlkit.exceptions import TOMLKitError

from ..errors import ConfigError
from ..models import ProjectConfig


def load_config(config_path: str | Path) -> TOMLDocument:
    """使用 tomlkit 读取配置文件，保留注释与格式。"""
    path = Path(config_path)
    if not path.is_file():
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as file:
            return parse(file.read())
    except TOMLKitError as error:
        raise ConfigError(f"配置文件解析失败 {path}: {error}") from error


def load_project_config(config_path: str | Path) -> ProjectConfig:
    """
    读取并校验配置文件。

    :param config_path: 配置文件路径。
    :type config_path: str | pathlib.Path
    :returns: 校验后的项目配置。
    :rtype: ProjectConfig
    :raises ConfigError: 文件缺失、无法解析或取值非法时。
    """
    document = load_config(config_path)
    return ProjectConfig.from_mapping(document.unwrap())
