import copy
import json
import os
import re
from typing import Any, Dict, Optional, Sequence, Tuple, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from app.core.errors import ConfigError
from app.core.logger import logger

load_dotenv()

# 自动获取项目根目录
BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
# 获取三次父目录 以保证其可移植性
CONFIG_PATH = os.path.join(BASE_DIR, "config", "settings.json")

# 唯一被实验读取的环境变量覆盖项
OUTPUT_DIR_ENV = "DCRL_OUTPUT_DIR"
# settings.json 的顶层分节；用户配置里出现任意一个就按分节文件解析，否则整份当作 train 节
SECTIONS = ("train", "theorem", "sweep", "server")

M = TypeVar("M", bound=BaseModel)


def load_settings(path: str = CONFIG_PATH) -> Dict[str, Any]:
    """从 config/settings.json 加载实验默认值；文件缺失或损坏时给出警告并返回空配置"""
    try:
        if not os.path.exists(path):
            logger.warning(f"⚠️ 配置文件未找到: {path}")
            return {}
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except Exception as e:
        logger.warning(f"⚠️ 配置文件读取失败: {e}")
        return {}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """递归合并：override 里的标量 / 列表直接替换，字典继续往下合并"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_user_config(path: str) -> Tuple[Dict[str, Any], str]:
    if not os.path.exists(path):
        raise ConfigError(f"{path}: 配置文件不存在")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: JSON 语法错误: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1:1: 顶层必须是 JSON 对象")
    return data, text


def key_line(text: str, loc: Sequence[Any]) -> Optional[int]:
    """按字段路径依次在原文里找 "key": ，返回最后一个键所在的行号 (找不到返回 None)"""
    pos, found = 0, None
    for part in loc:
        if not isinstance(part, str):
            continue
        m = re.compile(r'"' + re.escape(part) + r'"\s*:').search(text, pos)
        if m is None:
            continue
        pos, found = m.end(), m.start()
    if found is None:
        return None
    return text.count("\n", 0, found) + 1


def _format_validation(error: ValidationError, sources: Sequence[tuple]) -> str:
    lines = []
    for err in error.errors():
        loc = err.get("loc", ())
        dotted = ".".join(str(p) for p in loc)
        where = None
        for path, text, prefix in sources:
            line = key_line(text, tuple(prefix) + tuple(loc))
            if line is not None:
                where = f"{path}:{line}"
                break
        lines.append(f"{where or '<config>'}: {dotted or '<root>'}: {err.get('msg')}")
    return "\n".join(lines)


def load_section(
    section: str,
    model: Type[M],
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    settings_path: str = CONFIG_PATH,
) -> M:
    """
    settings.json[section] < 用户配置 < overrides，合并后校验成 pydantic 模型
    用户配置可以是和 settings.json 同结构的分节文件，也可以直接是该节的内容
    """
    settings = load_settings(settings_path)
    data = copy.deepcopy(settings.get(section, {}))
    sources = []
    if os.path.exists(settings_path):
        with open(settings_path, "r", encoding="utf-8") as f:
            sources.append((settings_path, f.read(), (section,)))

    if config_path:
        user, text = _read_user_config(config_path)
        if any(k in SECTIONS for k in user):
            data = deep_merge(data, user.get(section, {}))
            sources.insert(0, (config_path, text, (section,)))
        elif section == "train":
            data = deep_merge(data, user)
            sources.insert(0, (config_path, text, ()))
    if overrides:
        data = deep_merge(data, overrides)

    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation(e, sources)) from e


def load_train_config(
    config_path: Optional[str] = None,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    settings_path: str = CONFIG_PATH,
):
    """优先级：settings.json < --config < 环境变量 DCRL_OUTPUT_DIR < --seed / --out"""
    from app.services.experiment import TrainConfig

    overrides: Dict[str, Any] = {}
    env_out = os.getenv(OUTPUT_DIR_ENV)
    if env_out:
        overrides["output_dir"] = env_out
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["output_dir"] = out
    return load_section("train", TrainConfig, config_path, overrides, settings_path)
