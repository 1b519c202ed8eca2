"""
report_writer.py
输出文件的统一格式：每个文件都带一个记录配置、种子和工具版本的头部块
CSV 的头部是以 "# " 开头的注释行；JSON 的头部放在 "header" 键下
"""

import csv
import json
import os
from typing import Any, Dict, List, Optional, Sequence

from json_util import dump_json, to_jsonable
from settings import Settings


def make_header(config: Dict[str, Any], seed: Optional[int], command: str) -> Dict[str, Any]:
    return {
        "tool": Settings.TOOL_NAME,
        "tool_version": Settings.TOOL_VERSION,
        "command": command,
        "seed": seed,
        "config": to_jsonable(config),
    }


def write_csv(path: str, header: Dict[str, Any], columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key, value in header.items():
            f.write(f"# {key}: {json.dumps(to_jsonable(value), ensure_ascii=False, sort_keys=True)}\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(row)
    return path


def read_csv(path: str) -> List[Dict[str, str]]:
    """读回 write_csv 写出的文件（跳过头部注释行）"""
    with open(path, "r", encoding="utf-8", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path: str, header: Dict[str, Any], payload: Dict[str, Any]) -> str:
    data = {"header": header}
    data.update(payload)
    return dump_json(path, data)


def write_text(path: str, header: Dict[str, Any], text: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for key, value in header.items():
            f.write(f"# {key}: {json.dumps(to_jsonable(value), ensure_ascii=False, sort_keys=True)}\n")
        f.write(text)
        if not text.endswith("\n"):
            f.write("\n")
    return path


def format_table(columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """等宽文本表格，数字右对齐"""
    cells = [[str(c) for c in columns]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = []
    for n, row in enumerate(cells):
        parts = []
        for i, cell in enumerate(row):
            numeric = n > 0 and _is_number(rows[n - 1][i])
            parts.append(cell.rjust(widths[i]) if numeric else cell.ljust(widths[i]))
        lines.append("  ".join(parts).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return "x".join(str(v) for v in value)
    return "" if value is None else str(value)
