"""
ddfusion.utils.template
=======================

报告模板的加载与渲染，模板随包发布在 ``ddfusion/templates`` 下。
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Mapping

from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateError
from loguru import logger

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"


def format_metric(value: Any, digits: int = 4) -> str:
    """指标单元格：固定小数位，NaN 显示为 ``n/a``。"""

    number = float(value)
    if math.isnan(number):
        return "n/a"
    return f"{number:.{digits}f}"


def _environment() -> Environment:
    env = Environment(
        loader=FileSystemLoader(TEMPLATE_DIR),
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
        undefined=StrictUndefined,
    )
    env.filters["metric"] = format_metric
    return env


def get_template(name: str) -> str:
    """
    读取包内模板原始内容。

    :param name: 模板文件名，例如 ``report.md.j2``。
    :type name: str
    :returns: 模板原始文本。
    :rtype: str
    :raises FileNotFoundError: 当文件不存在时抛出。
    """
    template_path = TEMPLATE_DIR / name
    if not template_path.is_file():
        raise FileNotFoundError(f"Template file not found: {template_path}")
    return template_path.read_text(encoding="utf-8")


def render_template(name: str, context: Mapping[str, Any]) -> str:
    """
    渲染包内模板，渲染失败时记录警告并返回原始内容。

    :param name: 模板文件名。
    :type name: str
    :param context: 渲染上下文。
    :type context: Mapping[str, Any]
    :returns: 渲染后的文本。
    :rtype: str
    """
    try:
        return _environment().get_template(name).render(**context)
    except TemplateError as error:
        logger.warning("failed to render template name=[{}] error=[{}]", name, error)
        return get_template(name)
