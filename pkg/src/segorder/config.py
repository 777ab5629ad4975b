"""Run configuration: one JSON document with a section per concern.

Sections: ``corpus`` (synthetic generator), ``packing``, ``model``,
``optimizer``, ``task`` (fine-tuning, optionally from a named preset),
``train`` (evaluation/checkpoint cadence), ``paths`` and a top-level
``seed``. Values resolve as built-in defaults, then the config file, then
``section.key=value`` overrides. Unknown keys are rejected at every stage.
"""

from __future__ import annotations

import copy
import json
from dataclasses import MISSING, fields
from pathlib import Path

from .corpus import SynthSpec
from .errors import ConfigError
from .model import ModelConfig
from .optim import OptimizerConfig
from .packing import PackingConfig
from .training import PRESETS, TaskConfig


def _defaults_of(cls, skip=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in skip or not f.init:
            continue
        if f.default is not MISSING:
            value = f.default
        elif f.default_factory is not MISSING:
            value = f.default_factory()
        else:
            continue
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


DEFAULTS = {
    "seed": None,
    "corpus": {**_defaults_of(SynthSpec, skip=("seed",)), "segments_per_doc": [3, 8], "tokens_per_segment": [4, 12]},
    "packing": {**_defaults_of(PackingConfig), "context": 128, "max_segments": 16},
    "model": {
        "d": 64, "layers": 2, "heads": 4, "ffn_mult": 4, "context": 128, "max_segments": 16,
        "dropout": 0.1, "objective": "mlm+so", "dtype": "float32", "init_std": None, "ln_eps": 1e-5,
    },
    "optimizer": _defaults_of(OptimizerConfig),
    "task": {"preset": None, **{k: v for k, v in _defaults_of(TaskConfig).items()}, "num_classes": None},
    "train": {"eval_every": 500, "checkpoint_every": 500, "eval_fraction": 0.1},
    "paths": {
        "corpus": None, "vocab": None, "shards": [], "eval_shards": [], "run_dir": None,
        "checkpoint": None, "train": None, "validation": None, "output": None,
    },
}


def _merge(base: dict, update: dict, where: str = ""):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def parse_override(item: str) -> tuple:
    """``section.key=value``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


class RunConfig:
    def __init__(self, data: dict | None = None):
        self.data = copy.deepcopy(DEFAULTS)
        if data:
            _merge(self.data, data)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = cls(data)
        for item in overrides:
            cfg.set(*parse_override(item))
        return cfg

    def set(self, dotted: str, value):
        parts = dotted.split(".")
        node = self.data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value

    def __getitem__(self, section):
        return self.data[section]

    @property
    def seed(self):
        return self.data["seed"]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def echo(self, directory) -> Path:
        """Write the resolved config as ``config.json`` in ``directory``."""
        path = Path(directory) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.data == other.data

    # typed views ---------------------------------------------------------

    def _build(self, cls, section: dict, **extra):
        try:
            return cls(**{**section, **extra})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def synth_spec(self) -> SynthSpec:
        c = dict(self.data["corpus"])
        c["segments_per_doc"] = tuple(c["segments_per_doc"])
        c["tokens_per_segment"] = tuple(c["tokens_per_segment"])
        return self._build(SynthSpec, c, seed=self.seed or 0)

    def packing_config(self) -> PackingConfig:
        return self._build(PackingConfig, self.data["packing"])

    def model_config(self, vocab_size: int) -> ModelConfig:
        return self._build(ModelConfig, self.data["model"], vocab_size=vocab_size)

    def optimizer_config(self) -> OptimizerConfig:
        return self._build(OptimizerConfig, self.data["optimizer"])

    def task_config(self, num_classes: int | None = None) -> TaskConfig:
        t = dict(self.data["task"])
        name = t.pop("preset")
        explicit = {k: v for k, v in t.items() if v != DEFAULTS["task"][k]}
        if name is not None and name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        base = dict(PRESETS[name]) if name is not None else {}
        merged = {**{k: v for k, v in t.items() if k != "num_classes"}, **base, **explicit}
        merged["num_classes"] = explicit.get("num_classes") or num_classes
        if merged["num_classes"] is None:
            raise ConfigError("task.num_classes is not set and could not be inferred")
        return self._build(TaskConfig, merged)
