"""
ddfusion_helper
===============

:mod:`ddfusion_helper` 提供 DDFusion 配置文件的初始化、查看、修改与校验命令，
帮助首次使用者生成 ``ddfusion.config.toml``，并在调参阶段维护其内容。
"""

from .cli import main

__all__ = ["main"]
