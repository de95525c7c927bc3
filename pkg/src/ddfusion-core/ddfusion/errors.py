"""
ddfusion.errors
===============

统一的异常层级。库函数只负责抛出，``run.py`` 根据 ``exit_code`` 转换为进程退出码。
"""

from __future__ import annotations


class DDFusionError(Exception):
    """所有 DDFusion 异常的基类。"""

    exit_code: int = 2


class InvalidInputError(DDFusionError, ValueError):
    """输入形状、取值范围或参数不合法。"""


class ConfigError(DDFusionError, ValueError):
    """配置文件或模块超参数不合法。"""


class ImageIOError(DDFusionError, OSError):
    """PNG 读写失败，消息中必须包含路径。"""


class DatasetError(DDFusionError):
    """
    数据集目录不满足成对约定。

    :param message: 错误描述。
    :type message: str
    :param offenders: 未配对或不合法的文件名列表。
    :type offenders: list[str] | None
    """

    def __init__(self, message: str, offenders: list[str] | None = None):
        self.offenders = sorted(offenders or [])
        if self.offenders:
            message = f"{message}: {', '.join(self.offenders)}"
        super().__init__(message)


class CheckpointError(DDFusionError):
    """检查点格式、版本或摘要校验失败。"""


class NumericError(DDFusionError, ArithmeticError):
    """
    出现非有限数值。

    :param message: 错误描述。
    :type message: str
    :param step: 训练中出错的步数，非训练场景为 ``None``。
    :type step: int | None
    """

    exit_code = 3

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
