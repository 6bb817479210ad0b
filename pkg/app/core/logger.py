import os
import sys
from loguru import logger

# 1. 默认日志目录 (训练时一般改成 run 的输出目录)
LOG_DIR = "logs"
LOG_LEVEL = os.getenv("DCRL_LOG_LEVEL", "INFO")

# 2. 移除默认的控制台输出
logger.remove()

# 3. 自定义控制台输出格式
# <cyan>{name}:{function}:{line}</cyan>: 文件名:函数名:行号 (方便定位 bug)
logger.add(
    sys.stderr,
    level=LOG_LEVEL,
    format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
)

_file_sinks = {}


def add_file_sinks(log_dir: str = LOG_DIR) -> None:
    """
    给一次运行挂上文件日志：
    1. 普通日志，按天轮转，保留 7 天
    2. 错误日志单独保存，带完整堆栈
    同一个目录只挂一次
    """
    if log_dir in _file_sinks:
        return
    os.makedirs(log_dir, exist_ok=True)

    run_sink = logger.add(
        os.path.join(log_dir, "dcrl_run_{time:YYYY-MM-DD}.log"),
        rotation="00:00",
        retention="7 days",
        level=LOG_LEVEL,
        encoding="utf-8",
        enqueue=True,
    )
    error_sink = logger.add(
        os.path.join(log_dir, "dcrl_error_{time:YYYY-MM-DD}.log"),
        rotation="00:00",
        retention="30 days",
        level="ERROR",
        encoding="utf-8",
        enqueue=True,
        backtrace=True,
        diagnose=True,
    )
    _file_sinks[log_dir] = (run_sink, error_sink)


def remove_file_sinks() -> None:
    for run_sink, error_sink in _file_sinks.values():
        logger.remove(run_sink)
        logger.remove(error_sink)
    _file_sinks.clear()


__all__ = ["logger", "add_file_sinks", "remove_file_sinks"]
