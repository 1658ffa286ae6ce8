"""Line-oriented ``key = value`` config files.

One assignment per line; blank lines and ``#`` comments are ignored.
Values keep their text form here; callers coerce them against a typed
schema when building config objects.
"""

from __future__ import annotations

from pathlib import Path

from .errors import FormatError


def parse_kv_text(text: str) -> dict[str, str]:
    result: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        if key in result:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        result[key] = value.strip()
    return result


def read_kv_file(path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text(encoding="utf-8"))


def write_kv_file(path, values: dict) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def coerce(values: dict[str, str], schema: dict[str, type], what: str) -> dict:
    """Apply a name -> type schema, rejecting unknown keys."""
    out = {}
    for key, text in values.items():
        if key not in schema:
            raise FormatError(f"unknown {what} key {key!r}")
        typ = schema[key]
        try:
            if typ is bool:
                out[key] = text.lower() in ("1", "true", "yes", "on")
            else:
                out[key] = typ(text)
        except ValueError as exc:
            raise FormatError(f"{what} key {key!r}: cannot parse {text!r} as "
                              f"{typ.__name__}") from exc
    return out


def fnv1a32(text: str) -> int:
    """Tiny stable hash for tagging checkpoints with their config."""
    acc = 0x811C9DC5
    for byte in text.encode("utf-8"):
        acc = ((acc ^ byte) * 0x01000193) & 0xFFFFFFFF
    return acc
