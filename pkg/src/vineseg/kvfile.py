"""Line-oriented ``key = value`` text files (configs, metric reports, epoch logs).

``#`` starts a comment line, blank lines separate groups, everything is UTF-8.
"""

from __future__ import annotations

import math
from pathlib import Path


class KVSyntaxError(ValueError):
    def __init__(self, problems: list[tuple[int, str]], source: str = "<text>"):
        self.problems = problems
        self.source = source
        msg = "\n".join(f"{source}:{line}: {text}" for line, text in problems)
        super().__init__(msg)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def dump_kv(items: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in items.items())


def parse_groups(text: str, source: str = "<text>") -> list[list[tuple[int, str, str]]]:
    """Split into blank-line separated groups of ``(line_no, key, raw_value)``."""
    groups: list[list[tuple[int, str, str]]] = [[]]
    problems = []
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            if groups[-1]:
                groups.append([])
            continue
        if line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            problems.append((no, f"expected 'key = value', got {raw.strip()!r}"))
            continue
        groups[-1].append((no, key, value))
    if problems:
        raise KVSyntaxError(problems, source)
    return [g for g in groups if g]


def parse_kv(text: str, source: str = "<text>") -> list[tuple[int, str, str]]:
    """Flat list of entries; duplicate keys are an error."""
    entries = [e for g in parse_groups(text, source) for e in g]
    seen: dict[str, int] = {}
    problems = []
    for no, key, _ in entries:
        if key in seen:
            problems.append((no, f"duplicate key {key!r} (first set on line {seen[key]})"))
        seen.setdefault(key, no)
    if problems:
        raise KVSyntaxError(problems, source)
    return entries


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return {k: v for _, k, v in parse_kv(path.read_text(encoding="utf-8"), str(path))}


def append_group(path, items: dict) -> None:
    path = Path(path)
    prefix = "\n" if path.exists() and path.stat().st_size else ""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(prefix + dump_kv(items))
