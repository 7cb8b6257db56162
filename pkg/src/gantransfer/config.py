"""Run configuration: nested YAML sections validated into frozen dataclasses.

Every field has a default except the data paths. Unknown keys and badly
typed values are collected over the whole tree and reported together.
"""
from __future__ import annotations

import json
import types
import typing
from dataclasses import dataclass, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentPolicy
from .backbone import NetworkConfig
from .inversion import InversionSchedule
from .trainer import TransferConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class MetricsConfig:
    n_fake: int = 1000
    extractor: str = "frozen-random"
    extractor_seed: int = 0
    eval_seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    source: str | None = None
    target: str | None = None


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = NetworkConfig()
    pretrain: TransferConfig = TransferConfig(total_steps=2000, snapshot_every=500)
    transfer: TransferConfig = TransferConfig()
    inversion: InversionSchedule = InversionSchedule()
    metrics: MetricsConfig = MetricsConfig()
    data: DataConfig = DataConfig()


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(value, tp, path: str, problems: list[str]):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        problems.append(f"{path}: must not be null")
        return None
    if tp is AugmentPolicy:
        if isinstance(value, str):
            try:
                return AugmentPolicy.parse(value)
            except ValueError as exc:
                problems.append(f"{path}: {exc}")
                return None
        if isinstance(value, (list, tuple)):
            value = {"ops": list(value)}
    if is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{path}: expected a mapping")
            return None
        return _build(tp, value, path, problems)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            problems.append(f"{path}: expected a list")
            return None
        args = typing.get_args(tp)
        inner = args[0] if args else Any
        return tuple(_coerce(v, inner, f"{path}[{i}]", problems) for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-4) as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str, problems: list[str]):
    n_before = len(problems)
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    for key in data:
        if key not in known:
            problems.append(f"{prefix + '.' if prefix else ''}{key}: unknown key")
    kwargs = {}
    for name in known:
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], f"{prefix + '.' if prefix else ''}{name}", problems)
    if any(v is None and not _strip_optional(hints[k])[1] for k, v in kwargs.items()):
        return None
    if len(problems) > n_before:
        return None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        problems.append(f"{prefix or '<root>'}: {exc}")
        return None


def _merge_section_defaults(data: dict) -> dict:
    """Pretrain section defaults differ from a bare TransferConfig; fold them in first."""
    base = to_dict(RunConfig())
    return _deep_merge(base, data)


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    problems: list[str] = []
    merged = _merge_section_defaults(data)
    cfg = _build(RunConfig, merged, "", problems)
    problems = list(dict.fromkeys(problems))
    if problems:
        raise ConfigError(problems)
    return cfg


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values are parsed as YAML scalars."""
    data = _deep_merge({}, data or {})
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"{item}: override must look like key.path=value")
            continue
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"{key}: {p} is not a section")
                break
        else:
            node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else None
    if problems:
        raise ConfigError(problems)
    return data


def load(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        data = (json.loads(text) if Path(path).suffix == ".json" else yaml.safe_load(text)) or {}
        if isinstance(data, dict) and "run_config" in data:
            data = data["run_config"]
    return from_dict(apply_overrides(data, overrides or []))


def to_dict(cfg) -> dict:
    """Plain nested dict (lists for tuples) that ``from_dict`` maps back to ``cfg``."""
    if isinstance(cfg, AugmentPolicy):
        return {f.name: _plain(getattr(cfg, f.name)) for f in fields(cfg)}
    if is_dataclass(cfg):
        return {f.name: to_dict(getattr(cfg, f.name)) for f in fields(cfg) if f.init}
    return _plain(cfg)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)
