"""Flat ``key = value`` configuration files and value codecs.

A config file holds one setting per line. Blank lines and lines starting
with ``#`` are ignored; keys use underscores (``batch_size``), matching
the command-line flag with dashes (``--batch-size``).
"""

from __future__ import annotations

import math
from collections.abc import Callable
from pathlib import Path
from typing import Any

NONE_WORDS = ("none", "auto")
RESOLVED_CONFIG = "resolved-config"


class ConfigError(ValueError):
    pass


def read_config(path) -> dict[str, str]:
    """Raw string values keyed by name; duplicate keys and malformed lines are errors."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, sep, value = s.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_floats(text: str) -> tuple[float, ...]:
    """Comma-separated floats, e.g. ``0.5,0.25,0.125``."""
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    """Wrap ``parse`` so that ``none`` / ``auto`` map to ``None``."""

    def inner(text):
        if str(text).strip().lower() in NONE_WORDS:
            return None
        return parse(text)

    inner.__name__ = getattr(parse, "__name__", "value")
    return inner


def parse_kv(text: str) -> dict[str, str]:
    """``a=1,b=x`` into ``{"a": "1", "b": "x"}``."""
    out = {}
    for item in filter(None, (p.strip() for p in str(text).split(","))):
        k, sep, v = item.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {item!r}")
        out[k.strip()] = v.strip()
    return out


def format_value(value) -> str:
    """Text form that the matching parser reads back to the same value."""
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}={v}" for k, v in value.items())
    return str(value)


def write_resolved(directory, command: str, settings: dict) -> Path:
    """Snapshot of every setting a run used, one ``key = value`` per line."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"# synthnett {command}"] + [f"{k} = {format_value(settings[k])}" for k in sorted(settings)]
    path = d / RESOLVED_CONFIG
    path.write_text("\n".join(lines) + "\n")
    return path
