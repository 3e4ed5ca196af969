"""Flat key=value run configuration with typed parsing.

One option per line, ``key = value``; ``#`` starts a comment. Every command
declares its schema up front, unknown keys are rejected, and the effective
configuration (defaults + file + flags) is echoed into the output directory
so a run can be reproduced from its own artifacts.
"""
from __future__ import annotations

import os
from typing import Any, Dict, Mapping, Optional


class ConfigError(ValueError):
    pass


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


_PARSERS = {int: int, float: float, str: str, bool: _parse_bool}


def read_config_file(path: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[key] = value
    return out


def resolve(schema: Mapping[str, tuple], file_values: Optional[Mapping[str, str]] = None,
            overrides: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """Merge defaults, file values and CLI overrides under a typed schema.

    ``schema`` maps key -> (type, default). Unknown keys raise ConfigError.
    """
    cfg: Dict[str, Any] = {k: default for k, (_, default) in schema.items()}
    for source in (file_values or {},):
        for key, raw in source.items():
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r}")
            typ = schema[key][0]
            try:
                cfg[key] = _PARSERS[typ](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = schema[key][0](val)
    return cfg


def echo_config(cfg: Mapping[str, Any], out_dir: str,
                name: str = "effective_config.txt") -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")
    return path
