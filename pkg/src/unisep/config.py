"""TOML run configuration: parsing with strict unknown-key rejection,
canonical serialization, and content hashing.

The canonical form (sorted sections, sorted keys, one key per line) is what
gets hashed and embedded in checkpoints, so two configs with the same
settings always produce the same hash regardless of formatting.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

try:
    import tomllib as _toml
except ModuleNotFoundError:  # python < 3.11
    import tomli as _toml

from .errors import ValidationError


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        r = repr(v)
        # TOML floats need a decimal point or exponent
        return r if ("." in r or "e" in r or "E" in r) else r + ".0"
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ValidationError(f"cannot serialize config value of type {type(v).__name__}")


def canonical_toml(sections: dict) -> str:
    """Deterministic TOML text for a {section: {key: value}} mapping."""
    lines = []
    for sec in sorted(sections):
        body = sections[sec]
        if not isinstance(body, dict):
            raise ValidationError(f"top-level config entry {sec!r} must be a table")
        lines.append(f"[{sec}]")
        for key in sorted(body):
            lines.append(f"{key} = {_fmt_value(body[key])}")
        lines.append("")
    return "\n".join(lines)


def config_hash(sections: dict) -> str:
    return hashlib.sha256(canonical_toml(sections).encode("utf-8")).hexdigest()


def parse_toml(text: str) -> dict:
    try:
        return _toml.loads(text)
    except _toml.TOMLDecodeError as e:
        raise ValidationError(f"invalid TOML: {e}") from None


def read_toml(path: str | Path) -> dict:
    return parse_toml(Path(path).read_text(encoding="utf-8"))
