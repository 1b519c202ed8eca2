import json
import os
from enum import Enum
from typing import Any

import numpy as np

from errors import ConfigError


def load_json_file(path: str) -> Any:
    """
    读取 JSON 配置文件，解析失败时报出文件名、行号和列号
    :param path: 文件路径
    :return: 解析后的 JSON 对象（dict/list）
    """
    if not os.path.exists(path):
        raise ConfigError(f"文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    # 空文件单独提示，避免 JSONDecodeError 的 line 1 column 1 让人困惑
    if not text.strip():
        raise ConfigError(f"{path}: 文件为空")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: JSON 解析失败: {e.msg}")


def to_jsonable(value: Any) -> Any:
    """把 numpy 标量/数组、枚举、元组等转换成可直接 json.dumps 的结构"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dump_json(path: str, data: Any) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(data), f, ensure_ascii=False, indent=2)
        f.write("\n")
    return path
