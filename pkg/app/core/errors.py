from typing import Optional


class DCRLError(Exception):
    """所有业务异常的基类"""


class InvalidInputError(DCRLError, ValueError):
    """前置条件不满足：非法 token 序列、空 rollout 集合、长度不匹配等"""


class EnumerationBoundError(InvalidInputError):
    """策略树太大，无法穷举 (V^(max_len+1) 超过上限)"""


class ConfigError(DCRLError):
    """配置文件格式错误或字段校验失败 (消息里带行号)"""


class NumericalAbort(DCRLError):
    """训练中出现 NaN / Inf，中止并把出事的那一步落盘"""

    def __init__(self, message: str, step: int, question_id: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.question_id = question_id
        self.dump_path = dump_path
