"""Experiment configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from .regularizers import KINDS

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "bundled_configs", "DEFAULTS"]


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


DEFAULTS: dict = {
    "model": "lenet300100",
    "data": {"path": None, "synthetic": None},
    "seed": 0,
    "batch_size": 64,
    "optimizer": {"kind": "adam", "lr": 0.001, "momentum": 0.0},
    "epochs": {"pretrain": 30, "sparsify": 50, "finetune": 30},
    "pretrain": {"beta": 0.0, "checkpoint": None},
    "sparsify": {"regularizer": "hoyer_square", "decay": 0.0, "decay_channel": None, "beta": 0.0, "tl1_a": 1.0},
    "prune": {
        "mode": "elementwise",
        "threshold": {"mode": "ratio_of_std", "value": 0.0},
        "layers": {},
        "elementwise_within_groups": False,
    },
    "finetune": {"beta": 0.0},
    "histogram_bins": 50,
    "out": "runs/default",
}

_SYNTHETIC_DEFAULTS = {"n_train": 2000, "n_test": 500, "classes": 10, "separation": 6.0}
_THRESHOLD_MODES = ("ratio_of_std", "absolute")


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(where, "unknown key")
        if isinstance(base[key], dict) and key not in ("layers",) and base[key] is not None:
            if not isinstance(val, dict):
                raise ConfigError(where, "expected an object")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _number(cfg: dict, path: str, *, minimum=None, positive=False, integer=False):
    keys = path.split(".")
    val: Any = cfg
    for k in keys:
        val = val[k]
    if integer:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(path, f"expected an integer, got {val!r}")
    elif isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(path, f"expected a number, got {val!r}")
    if positive and not val > 0:
        raise ConfigError(path, f"must be > 0, got {val}")
    if minimum is not None and not val >= minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {val}")
    return val


def _check_threshold(th: Any, path: str) -> None:
    if not isinstance(th, dict):
        raise ConfigError(path, "expected an object with 'mode' and 'value'")
    extra = set(th) - {"mode", "value"}
    if extra:
        raise ConfigError(f"{path}.{sorted(extra)[0]}", "unknown key")
    if th.get("mode") not in _THRESHOLD_MODES:
        raise ConfigError(f"{path}.mode", f"expected one of {_THRESHOLD_MODES}")
    _number(th, "value", minimum=0)


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "expected a JSON object")
        cfg = _merge(DEFAULTS, doc, "")
        from .model import ARCHITECTURES

        if cfg["model"] not in ARCHITECTURES:
            raise ConfigError("model", f"expected one of {sorted(ARCHITECTURES)}")
        data = cfg["data"]
        if (data["path"] is None) == (data["synthetic"] is None):
            raise ConfigError("data", "set exactly one of 'path' or 'synthetic'")
        if data["synthetic"] is not None:
            syn = data["synthetic"]
            if not isinstance(syn, dict):
                raise ConfigError("data.synthetic", "expected an object")
            unknown = set(syn) - set(_SYNTHETIC_DEFAULTS)
            if unknown:
                raise ConfigError(f"data.synthetic.{sorted(unknown)[0]}", "unknown key")
            data["synthetic"] = {**_SYNTHETIC_DEFAULTS, **syn}
            for k in ("n_train", "n_test", "classes"):
                _number(data["synthetic"], k, positive=True, integer=True)
        _number(cfg, "seed", minimum=0, integer=True)
        _number(cfg, "batch_size", positive=True, integer=True)
        _number(cfg, "histogram_bins", positive=True, integer=True)
        if cfg["optimizer"]["kind"] not in ("adam", "sgd"):
            raise ConfigError("optimizer.kind", "expected 'adam' or 'sgd'")
        _number(cfg, "optimizer.lr", positive=True)
        _number(cfg, "optimizer.momentum", minimum=0)
        for stage in ("pretrain", "sparsify", "finetune"):
            _number(cfg, f"epochs.{stage}", minimum=0, integer=True)
        for key in ("pretrain.beta", "sparsify.decay", "sparsify.beta", "finetune.beta"):
            _number(cfg, key, minimum=0)
        _number(cfg, "sparsify.tl1_a", positive=True)
        if cfg["sparsify"]["decay_channel"] is not None:
            _number(cfg, "sparsify.decay_channel", minimum=0)
        if cfg["sparsify"]["regularizer"] not in KINDS:
            raise ConfigError("sparsify.regularizer", f"expected one of {KINDS}")
        prune = cfg["prune"]
        if prune["mode"] not in ("elementwise", "structural"):
            raise ConfigError("prune.mode", "expected 'elementwise' or 'structural'")
        _check_threshold(prune["threshold"], "prune.threshold")
        if not isinstance(prune["layers"], dict):
            raise ConfigError("prune.layers", "expected an object keyed by layer name")
        for name, th in prune["layers"].items():
            _check_threshold(th, f"prune.layers.{name}")
        if not isinstance(prune["elementwise_within_groups"], bool):
            raise ConfigError("prune.elementwise_within_groups", "expected a boolean")
        if not isinstance(cfg["out"], str) or not cfg["out"]:
            raise ConfigError("out", "expected a directory path")
        return cls(cfg)

    def __getitem__(self, key):
        return self.raw[key]

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       data: Optional[str] = None) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = seed
        if out is not None:
            raw["out"] = str(out)
        if data is not None:
            raw["data"] = {"path": str(data), "synthetic": None}
        return ExperimentConfig.from_dict(raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def bundled_configs() -> dict:
    """Name -> path of the example configs shipped with the package."""
    root = resources.files("hoyersparse") / "configs"
    return {p.name[:-5]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}
