"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Keys may use dashes or
underscores. Values stay strings here; the CLI converts them with the same
parsers it uses for flags.
"""
from __future__ import annotations

from pathlib import Path


class InvalidConfig(ValueError):
    pass


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise InvalidConfig(f"{source}:{lineno}: empty key")
        if key in out:
            raise InvalidConfig(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfig(f"cannot read config file {p}: {exc.strerror or exc}") from exc
    return parse_config(text, str(p))


def dump_config(values: dict) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InvalidConfig(f"not a boolean: {value!r}")
