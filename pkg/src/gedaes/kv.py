"""Line-oriented ``key=value`` text used for configs, manifests and run records."""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Any, Iterable


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return ""
    return str(value)


def format_record(pairs: Iterable[tuple[str, Any]]) -> str:
    """One record on one line: ``k1=v1 k2=v2``; values must not contain spaces."""
    out = []
    for key, value in pairs:
        text = format_value(value)
        if " " in text or "\t" in text:
            raise ValueError(f"value for {key!r} contains whitespace: {text!r}")
        out.append(f"{key}={text}")
    return " ".join(out)


def parse_record(line: str) -> dict[str, str]:
    record = {}
    for part in line.split():
        key, sep, value = part.partition("=")
        if not sep or not key:
            raise ValueError(f"malformed key=value field {part!r}")
        record[key] = value
    return record


def read_kv_file(path) -> dict[str, str]:
    """One ``key=value`` per line; ``#`` comments and blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def write_kv_file(path, pairs: Iterable[tuple[str, Any]]) -> None:
    Path(path).write_text("".join(f"{k}={format_value(v)}\n" for k, v in pairs), encoding="utf-8")


def coerce(type_name: str, raw: str):
    """Convert ``raw`` according to a dataclass field annotation string."""
    t = type_name.replace(" ", "")
    if raw == "" and "None" in t:
        return None
    base = t.split("|")[0]
    if base == "bool":
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if base == "int":
        return int(raw)
    if base == "float":
        return float(raw)
    if base.startswith("tuple[float"):
        return tuple(float(x) for x in raw.split(","))
    if base.startswith("tuple[int") or base.startswith("list[int"):
        return tuple(int(x) for x in raw.split(","))
    if base.startswith("list[float"):
        return [float(x) for x in raw.split(",")]
    return raw


def dataclass_from_strings(cls, values: dict[str, str], prefix: str = ""):
    """Build ``cls`` from string values, taking fields named ``prefix + name``."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in values:
            kwargs[f.name] = coerce(str(f.type), values[key])
    return cls(**kwargs)


def dataclass_pairs(obj, prefix: str = "") -> list[tuple[str, Any]]:
    return [(prefix + f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj)]
