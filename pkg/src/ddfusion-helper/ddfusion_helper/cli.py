"""
ddfusion_helper.cli
===================

Rich 驱动的配置命令：``init`` 生成默认配置，``show`` 展示摘要，
``set`` 修改单个配置项，``validate`` 列出待处理问题。
"""

from __future__ import annotations

import argparse
from pathlib import Path
from typing import Sequence

from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.theme import Theme

from ddfusion.errors import ConfigError

from .config_manager import ConfigManager


class DDFusionHelperApp:
    """
    负责调度各个配置子命令并以 Rich 渲染结果。

    :param config_path: 配置文件路径。
    :type config_path: Path
    :param console: 输出控制台，测试时可替换。
    :type console: Console | None
    """

    def __init__(self, config_path: Path, console: Console | None = None):
        self.config_manager = ConfigManager(config_path)
        theme = Theme({"text": "white", "warning": "yellow", "error": "red"})
        self.console = console or Console(theme=theme)

    def init(self, force: bool = False) -> int:
        """
        写入默认配置；文件已存在且未指定 ``force`` 时不覆盖。
        """

        if self.config_manager.exists() and not force:
            self.console.print(
                Panel.fit(f"{self.config_manager.config_path} 已存在，如需覆盖请加 --force", border_style="yellow")
            )
            return 1
        self.config_manager.reset()
        self.config_manager.save()
        self.console.print(Panel.fit(f"配置已写入 {self.config_manager.config_path}"))
        return 0

    def show(self) -> int:
        self._print_summary(title="当前配置概览")
        return 0

    def set(self, dotted_key: str, raw: str) -> int:
        """
        修改一个配置项，修改后整体校验通过才写回磁盘。
        """

        value = self.config_manager.set_value(dotted_key, raw)
        issues = self.config_manager.schema_issues()
        if issues:
            self._print_issues(issues)
            return 2
        self.config_manager.save()
        self.console.print(f"{dotted_key} = {value!r} 已保存。")
        return 0

    def validate(self) -> int:
        issues = self.config_manager.validate()
        if not issues:
            self.console.print(Panel("所有关键检查均通过。", border_style="green"))
            return 0
        self._print_issues(issues)
        return 2

    def _print_summary(self, title: str) -> None:
        summary = self.config_manager.summarize()
        table = Table(title=title, show_lines=True, box=box.SIMPLE, title_justify="left")
        table.add_column("字段", style="bold")
        table.add_column("内容")
        for section, values in summary.items():
            pretty = "\n".join(f"{k} = {v}" for k, v in values.items()) or "(空)"
            table.add_row(section, pretty)
        self.console.print(table)

    def _print_issues(self, issues: Sequence[str]) -> None:
        table = Table(title="待处理问题", box=box.SIMPLE_HEAD)
        table.add_column("#")
        table.add_column("描述")
        for idx, issue in enumerate(issues, start=1):
            table.add_row(str(idx), issue)
        self.console.print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddfusion-helper", description="DDFusion 配置助手")
    parser.add_argument("--config", default="ddfusion.config.toml", help="配置文件路径")
    commands = parser.add_subparsers(dest="command")
    init = commands.add_parser("init", help="生成默认配置")
    init.add_argument("--force", action="store_true", help="覆盖已有配置")
    commands.add_parser("show", help="展示配置摘要")
    setter = commands.add_parser("set", help="修改单个配置项，例如 train.stage1_steps 20")
    setter.add_argument("key")
    setter.add_argument("value")
    commands.add_parser("validate", help="校验配置")
    return parser


def build_app(args: argparse.Namespace) -> DDFusionHelperApp:
    """
    根据命令行参数构建应用实例，便于测试。
    """

    return DDFusionHelperApp(Path(args.config).resolve())


def main(argv: Sequence[str] | None = None) -> int:
    """
    ddfusion-helper CLI 入口，返回进程退出码。
    """

    args = build_parser().parse_args(argv)
    app = build_app(args)
    try:
        if args.command == "init":
            return app.init(force=args.force)
        if args.command == "set":
            return app.set(args.key, args.value)
        if args.command == "validate":
            return app.validate()
        return app.show()
    except ConfigError as error:
        app.console.print(f"[error]{error}[/error]")
        return error.exit_code
