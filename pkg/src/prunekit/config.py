"""INI config files with sections mirroring the module config types.

Sections: [model], [data], [teacher], [recovery], [prune]. Every key is
optional; CLI flags override file values. Unknown keys fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
import os

from .model import ModelConfig
from .recovery import LoraSettings, RecoveryConfig, TeacherConfig


class ConfigError(ValueError):
    """Unreadable config file, unknown key, or bad value."""


_MODEL_KEYS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TEACHER_KEYS = {f.name for f in dataclasses.fields(TeacherConfig)}
_RECOVERY_KEYS = {f.name for f in dataclasses.fields(RecoveryConfig)} | {
    "lora_rank", "lora_scaling", "lora_targets"} - {"lora"}
_DATA_KEYS = {"tasks", "n", "eval_fraction"}
_PRUNE_KEYS = {"calib_size", "min_heads", "min_channels"}

_SECTIONS = {
    "model": set(_MODEL_KEYS),
    "data": _DATA_KEYS,
    "teacher": _TEACHER_KEYS,
    "recovery": _RECOVERY_KEYS,
    "prune": _PRUNE_KEYS,
}

_FLOAT_KEYS = {
    "rms_eps", "peak_lr", "floor_frac", "momentum", "clip", "alpha", "beta",
    "gamma", "tau", "data_fraction", "lr", "lora_scaling", "eval_fraction",
}
_STR_KEYS = {"kd_direction", "scope", "tasks", "lora_targets", "match_layers"}


def _coerce(section, key, raw):
    if key in _STR_KEYS:
        return raw.strip()
    if key in _FLOAT_KEYS:
        return float(raw)
    return int(raw)


def load_config(path):
    """Parse an INI file into {section: {key: typed value}}."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        allowed = _SECTIONS[section]
        values = {}
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                values[key] = _coerce(section, key, raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for [{section}] {key}: {raw!r}") from exc
        out[section] = values
    return out


def model_config(cfg, overrides=None):
    values = dict(cfg.get("model", {}))
    values.update(overrides or {})
    try:
        return ModelConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [model] config: {exc}") from exc


def teacher_config(cfg, overrides=None):
    values = dict(cfg.get("teacher", {}))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TeacherConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [teacher] config: {exc}") from exc


def _parse_match_layers(raw):
    try:
        return tuple(int(tok) for tok in str(raw).split(",") if tok.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"bad match_layers {raw!r}") from exc


def recovery_config(cfg, overrides=None):
    values = dict(cfg.get("recovery", {}))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    lora_kw = {}
    if "lora_rank" in values:
        lora_kw["rank"] = int(values.pop("lora_rank"))
    if "lora_scaling" in values:
        lora_kw["scaling"] = float(values.pop("lora_scaling"))
    if "lora_targets" in values:
        lora_kw["targets"] = tuple(t.strip() for t in values.pop("lora_targets").split(","))
    if "match_layers" in values:
        values["match_layers"] = _parse_match_layers(values["match_layers"])
    try:
        return RecoveryConfig(lora=LoraSettings(**lora_kw), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [recovery] config: {exc}") from exc


def data_settings(cfg, overrides=None):
    values = {"tasks": "visual-lookup,visual-count,prompt-echo",
              "n": 1920, "eval_fraction": 0.2}
    values.update(cfg.get("data", {}))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    tasks = tuple(t.strip() for t in str(values["tasks"]).split(",") if t.strip())
    return {"tasks": tasks, "n": int(values["n"]),
            "eval_fraction": float(values["eval_fraction"])}


def prune_settings(cfg, overrides=None):
    values = {"calib_size": 10, "min_heads": 1, "min_channels": None}
    values.update(cfg.get("prune", {}))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return values
