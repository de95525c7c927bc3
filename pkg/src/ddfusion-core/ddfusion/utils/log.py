import sys
from pathlib import Path

from loguru import logger


def setup_log(log_path: str | Path, level: str = "INFO") -> None:
    """
    配置 loguru：文件 sink 按大小滚动，另加一个简洁的 stderr sink。

    :param log_path: 日志文件路径，父目录不存在时自动创建。
    :type log_path: str | pathlib.Path
    :param level: 最低日志级别。
    :type level: str
    """
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    logger.remove()
    logger.add(str(log_path), level=level, rotation="10 MB", retention="10 days", compression="zip")
    logger.add(sys.stderr, level=level, format="<level>{level: <7}</level> {message}")
