"""Experiment configuration: flat `dotted.key=value` files, CLI overrides and dumping.

    # comment
    model.H=4
    mppi.sigma=[0.3, 0.3]
    io.out_dir=runs/h4

Values are read as JSON where possible (numbers, booleans, null, lists,
objects) and kept as plain strings otherwise.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Union

from pydantic import ValidationError

from pennmpc.errors import ConfigError
from pennmpc.models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)


def parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_assignment(line: str, where: str = "<override>") -> tuple[str, Any]:
    key, sep, value = line.partition("=")
    key = key.strip()
    if not sep or not key or any(not part for part in key.split(".")):
        raise ConfigError(f"{where}: expected dotted.key=value, got {line.strip()!r}")
    return key, parse_value(value)


def parse_lines(text: str, source: str = "<config>") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, value = parse_assignment(stripped, f"{source}:{line_no}")
        flat[key] = value
    return flat


def nest(flat: dict[str, Any]) -> dict[str, Any]:
    """{"a.b": 1, "a.c": 2} -> {"a": {"b": 1, "c": 2}}."""
    tree: dict[str, Any] = {}
    for key, value in flat.items():
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"key {key!r} descends into {part!r}, which already holds a value")
            node = child
        if isinstance(node.get(parts[-1]), dict) and not isinstance(value, dict):
            raise ConfigError(f"key {key!r} overwrites a whole section")
        node[parts[-1]] = value
    return tree


def _merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def build_config(flat: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(nest(flat))
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid config at {loc or '<root>'}: {first['msg']} ({exc.error_count()} error(s))") from exc


def load_config(path: Union[str, Path, None] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Defaults, then the file (if any), then `key=value` overrides, validated as one ExperimentConfig."""
    flat: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        flat.update(parse_lines(text, str(path)))
    for item in overrides:
        key, value = parse_assignment(item)
        flat[key] = value
    return build_config(flat)


def apply_overrides(cfg: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    update = dict(parse_assignment(item) for item in overrides)
    if not update:
        return cfg
    merged = _merge(cfg.model_dump(by_alias=True), nest(update))
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid override: {exc.errors()[0]['msg']}") from exc


def flatten(tree: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def dump_config(cfg: ExperimentConfig) -> str:
    """Every effective value, one `key=value` line each; `load_config` on the result gives back `cfg`."""
    flat = flatten(cfg.model_dump(by_alias=True, mode="json"))
    return "".join(f"{key}={json.dumps(value, sort_keys=True)}\n" for key, value in flat.items())


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()
