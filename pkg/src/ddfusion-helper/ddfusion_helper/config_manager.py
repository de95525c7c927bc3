"""
ddfusion_helper.config_manager
==============================

封装 TOML 读写、按点号路径修改配置项与校验逻辑，供 CLI 调度。
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping, MutableMapping

from tomlkit import comment, document, dumps, nl, parse, table
from tomlkit.exceptions import TOMLKitError
from tomlkit.items import Table
from tomlkit.toml_document import TOMLDocument

from ddfusion.errors import ConfigError
from ddfusion.models import ProjectConfig

SECTION_COMMENTS = {
    "paths": "数据与输出目录，相对路径以当前工作目录为准",
    "train": "两阶段训练超参数与退化采样区间",
    "blocks": "网络结构超参数",
    "loss": "损失权重与开关",
    "degradation": "degrade 命令的默认退化参数，强度为 0 时按 [train] 区间逐文件抽取",
}


class ConfigManager:
    """
    负责读取、更新与写入 ``ddfusion.config.toml``。

    :param config_path: 配置文件路径。
    :type config_path: Path
    """

    def __init__(self, config_path: Path):
        self.config_path = config_path
        self._document: TOMLDocument | None = None

    @property
    def document(self) -> TOMLDocument:
        """
        返回内存中的配置文档，若尚未加载则立即加载。

        :returns: TOML 文档对象。
        :rtype: TOMLDocument
        """

        if self._document is None:
            self.load()
        assert self._document is not None
        return self._document

    def exists(self) -> bool:
        return self.config_path.exists()

    def load(self) -> TOMLDocument:
        """
        读取配置文件，若不存在则返回全新的文档。

        :returns: TOML 文档。
        :rtype: TOMLDocument
        :raises ConfigError: 文件无法解析时。
        """

        if self.exists():
            content = self.config_path.read_text(encoding="utf-8")
            try:
                self._document = parse(content)
            except TOMLKitError as error:
                raise ConfigError(f"配置文件解析失败 {self.config_path}: {error}") from error
        else:
            self._document = document()
        return self._document

    def reset(self) -> TOMLDocument:
        """
        用默认配置重建文档，每个配置节前带一行说明注释。

        :returns: 新建的 TOML 文档。
        :rtype: TOMLDocument
        """

        doc = document()
        doc.add(comment("DDFusion 配置文件"))
        defaults = ProjectConfig().to_mapping()
        doc.add("version", defaults.pop("version"))
        for section, values in defaults.items():
            doc.add(nl())
            doc.add(comment(SECTION_COMMENTS[section]))
            doc.add(section, _to_table(values))
        self._document = doc
        return doc

    def save(self) -> None:
        """
        将内存中的配置写回磁盘，必要时自动创建父目录。
        """

        doc = self.document
        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        self.config_path.write_text(dumps(doc), encoding="utf-8")

    def set_value(self, dotted_key: str, raw: str) -> Any:
        """
        按 ``section.key`` 写入一个值，``raw`` 按 TOML 字面量解析，解析失败时视为字符串。

        :param dotted_key: 例如 ``train.stage1_steps``。
        :type dotted_key: str
        :param raw: 命令行上给出的值。
        :type raw: str
        :returns: 实际写入的值。
        :raises ConfigError: 键路径不是 ``section.key`` 形式时。
        """

        parts = dotted_key.split(".")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"配置项需写成 section.key，实际为 {dotted_key!r}")
        section, key = parts
        value = _parse_literal(raw)
        _ensure_table(self.document, section)[key] = value
        return value

    def summarize(self) -> dict[str, Any]:
        """
        按配置节整理内容，缺失的键以默认值补齐，供 Rich 表格展示。

        :returns: 节名到键值对的映射。
        :rtype: dict[str, Any]
        """

        merged = ProjectConfig().to_mapping()
        merged.pop("version")
        current = self.document.unwrap()
        for section, values in merged.items():
            given = current.get(section)
            if isinstance(given, Mapping):
                values.update(given)
        return merged

    def schema_issues(self) -> list[str]:
        """只校验结构与取值，不检查文件系统。"""

        try:
            ProjectConfig.from_mapping(self.document.unwrap())
        except ConfigError as error:
            return [str(error)]
        return []

    def validate(self) -> list[str]:
        """
        校验配置结构与取值，并检查数据目录是否存在。

        :returns: 发现的问题列表，若为空表示通过。
        :rtype: list[str]
        """

        issues: list[str] = []
        if not self.exists():
            issues.append(f"配置文件不存在: {self.config_path}")
        schema = self.schema_issues()
        if schema:
            return issues + schema
        config = ProjectConfig.from_mapping(self.document.unwrap())
        data_dir = Path(config.paths.data_dir).expanduser()
        for sub in ("ir", "vi"):
            if not (data_dir / sub).is_dir():
                issues.append(f"paths.data_dir 下缺少 {sub}/ 目录: {data_dir / sub}")
        return issues


def _parse_literal(raw: str) -> Any:
    try:
        return parse(f"value = {raw}")["value"].unwrap()
    except TOMLKitError:
        return raw


def _to_table(values: Mapping[str, Any]) -> Table:
    new_table = table()
    for key, value in values.items():
        new_table.add(key, list(value) if isinstance(value, tuple) else value)
    return new_table


def _ensure_table(doc: TOMLDocument, key: str) -> Table:
    value = doc.get(key)
    if isinstance(value, Table):
        return value
    new_table = table()
    if isinstance(value, MutableMapping):
        new_table.update(value)  # type: ignore[arg-type]
    doc[key] = new_table
    return new_table
