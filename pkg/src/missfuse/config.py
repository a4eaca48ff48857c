"""Flat ``key=value`` files mapped onto dataclasses.

Keys carry a section prefix (``gen.``, ``model.``, ``train.``, ``eval.``);
top-level run options have none. Blank lines and lines starting with ``#``
are ignored.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError, ParseError


def parse_lines(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Return ``{key: (raw value, line number)}``."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected key=value, got {raw!r}", line=lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ParseError(f"{source}: empty key", line=lineno)
        out[key] = (value.strip(), lineno)
    return out


def read_kv(path: str | Path) -> dict[str, tuple[str, int]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_lines(text, str(path))


def _is_tuple(tp) -> bool:
    return typing.get_origin(tp) is tuple


def convert(value: str, tp, key: str):
    """Convert a raw string to the annotated field type."""
    try:
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
        if _is_tuple(tp):
            inner = typing.get_args(tp)[0]
            parts = [p for p in value.replace(":", ",").split(",") if p.strip()]
            return tuple(convert(p.strip(), inner, key) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    raise ConfigError(f"unsupported field type {tp!r} for {key}")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def field_types(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def dump(obj, prefix: str = "") -> list[str]:
    return [f"{prefix}{f.name}={format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


def load(cls, values: dict[str, str], prefix: str = "", base=None):
    """Build ``cls`` from ``values`` (keys with ``prefix``), starting from ``base`` or defaults."""
    types = field_types(cls)
    kwargs = {}
    for key, raw in values.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in types:
            continue
        kwargs[name] = convert(raw, types[name], key)
    if base is not None:
        return dataclasses.replace(base, **kwargs)
    return cls(**kwargs)
