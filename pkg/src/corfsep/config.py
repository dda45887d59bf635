"""Run configuration: built-in defaults, overlaid by a YAML file, overlaid by flags."""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .extractor import ConditionedConfig
from .separator import SeparatorConfig
from .stop import StopClassifierConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "deterministic": False,
    "workers": 1,
    "out": "runs",
    "simulate": {
        "corpus": None,
        "split": "train",
        "n_speakers": 2,
        "count": 100,
        "max_seconds": None,
        "synthetic_speakers": 0,
        "synthetic_utterances": 8,
        "synthetic_seconds": 4.0,
    },
    "separator": {f.name: f.default for f in fields(SeparatorConfig)},
    "train": {**TrainConfig().to_dict()},
    "stage2": {
        **{f.name: f.default for f in fields(SeparatorConfig)},
        "num_outputs": 1,
        "conditioning_blocks": [1, 3, 5],
        "warm_start": True,
    },
    "stop": {**StopClassifierConfig().to_dict(), "max_depth": 3},
    "separate": {"max_iterations": 10, "terminal": "residual"},
    "data": {"train": [], "valid": [], "test": None},
    "checkpoints": {"stage1": None, "stop": None, "stage2": None},
}
for _section in ("train", "stop"):
    DEFAULTS[_section].pop("seed")
    DEFAULTS[_section].pop("deterministic")


def deep_merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in out:
            raise ConfigError(f"unknown key {path!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"key {path!r} must be a mapping")
            out[key] = deep_merge(out[key], value, path + ".")
        else:
            out[key] = value
    return out


def parse_assignment(text: str) -> dict:
    """``a.b=value`` to ``{"a": {"b": value}}`` with YAML value parsing."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw else None
    node: Dict[str, Any] = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def load_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("config file not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(" ".join(str(exc).split())) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    return data


@dataclass
class RunConfig:
    raw: Dict[str, Any]

    @classmethod
    def build(cls, file: Optional[str] = None, overrides: tuple = ()) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if file:
            try:
                cfg = deep_merge(cfg, load_file(file))
            except ConfigError as exc:
                raise ConfigError(f"{file}: {exc}") from None
        for o in overrides:
            cfg = deep_merge(cfg, o)
        return cls(cfg)

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def deterministic(self) -> bool:
        return bool(self.raw["deterministic"])

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    def separator(self) -> SeparatorConfig:
        return self._make(SeparatorConfig, self.raw["separator"], "separator")

    def train(self) -> TrainConfig:
        return self._make(TrainConfig, {**self.raw["train"], "seed": self.seed, "deterministic": self.deterministic}, "train")

    def conditioned(self) -> ConditionedConfig:
        s = dict(self.raw["stage2"])
        blocks = s.pop("conditioning_blocks")
        s.pop("warm_start")
        sep = self._make(SeparatorConfig, s, "stage2")
        try:
            return ConditionedConfig(sep, frozenset(blocks))
        except ValueError as exc:
            raise ConfigError(f"stage2.conditioning_blocks: {exc}") from None

    @property
    def warm_start(self) -> bool:
        return bool(self.raw["stage2"]["warm_start"])

    def stop(self) -> StopClassifierConfig:
        s = {k: v for k, v in self.raw["stop"].items() if k != "max_depth"}
        return self._make(StopClassifierConfig, {**s, "seed": self.seed, "deterministic": self.deterministic}, "stop")

    @staticmethod
    def _make(kind, values: dict, section: str):
        try:
            return kind(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {section!r}: {exc}") from None

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)
