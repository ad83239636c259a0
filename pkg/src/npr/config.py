"""TOML configuration with packaged defaults and per-key overrides."""
from __future__ import annotations

import copy
import sys
from importlib import resources
from typing import Any, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from npr.splat import SplatConfig
from npr.stq import SamplingConfig


def default_config() -> dict:
    text = resources.files("npr").joinpath("default_config.toml").read_text()
    return tomllib.loads(text)


def merge(base: dict, override: Mapping[str, Any]) -> dict:
    """Recursive dict merge; unknown sections or keys are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise KeyError("unknown config key %r" % key)
        if isinstance(out[key], dict):
            if not isinstance(value, Mapping):
                raise TypeError("config section %r must be a table" % key)
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> dict:
    cfg = default_config()
    if path:
        with open(path, "rb") as f:
            cfg = merge(cfg, tomllib.load(f))
    if overrides:
        cfg = merge(cfg, overrides)
    return cfg


def sampling_config(cfg: dict) -> SamplingConfig:
    return SamplingConfig.from_dict(cfg["sampling"])


def splat_config(cfg: dict) -> SplatConfig:
    return SplatConfig(**cfg["splat"])
