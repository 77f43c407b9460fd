"""Flat ``key = value`` text files used for manifests and configs.

Lines starting with ``#`` are comments. Values are parsed as Python
literals when possible (ints, floats, lists, booleans) and kept as plain
strings otherwise.
"""
import ast
from pathlib import Path


def parse_value(text):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return repr(list(value))
    return str(value)


def loads(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def dumps(mapping, header=None):
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for key, value in mapping.items():
        lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def read(path):
    return loads(Path(path).read_text(encoding="utf-8"))


def write(path, mapping, header=None):
    Path(path).write_text(dumps(mapping, header), encoding="utf-8")
