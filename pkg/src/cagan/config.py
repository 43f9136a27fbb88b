"""Run configuration: nested sections with defaults and strict key checking."""
from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .synth import ActivityScriptConfig, ConfigError
from .trainer import TrainConfig
from .variants import VARIANTS


def _synth_defaults():
    d = ActivityScriptConfig().to_dict()
    # class count and aux modality are owned by the model section
    del d["k"], d["aux_mode"]
    # None means the k-dependent defaults
    d["transition_matrix"] = None
    d["duration_ranges"] = None
    return d


def _train_defaults():
    return {f.name: copy.deepcopy(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}


def default_config():
    return {
        "data": {"path": "data", "count": 20, "split_ratios": [0.7, 0.15, 0.15], "synth": _synth_defaults()},
        "model": {"preset": "desk32", "k": 6, "aux_mode": "frame_diff", "width_factor": None,
                  "noise_rate": 0.5},
        "train": _train_defaults(),
        "eval": {"split": "test", "pooled_map": True, "noise_at_inference": False, "plots": True,
                 "embedding_stride": 4},
        "ablate": {"variants": list(VARIANTS), "seeds": [0]},
        "output": {"directory": "runs"},
    }


def merge(base, override, path=""):
    """Recursively overlay ``override`` on ``base``; unknown keys raise ConfigError."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            out[key] = merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_document(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml
        doc = yaml.safe_load(text)
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


class RunConfig:
    """Resolved configuration. ``raw`` holds the nested dict."""

    def __init__(self, raw=None):
        self.raw = merge(default_config(), raw or {})
        self._check()

    @classmethod
    def load(cls, path=None, seed=None, variant=None, preset=None, out=None):
        raw = load_document(path) if path else {}
        cfg = merge(default_config(), raw)
        if seed is not None:
            cfg["train"]["seed"] = seed
            cfg["data"]["synth"]["seed"] = seed
        if variant is not None:
            cfg["train"]["variant"] = variant
        if preset is not None:
            cfg["model"]["preset"] = preset
        if out is not None:
            cfg["output"]["directory"] = str(out)
        return cls(cfg)

    def _check(self):
        m = self.raw["model"]
        if m["preset"] not in ("desk32", "paper224"):
            raise ConfigError(f"model.preset must be desk32 or paper224, got {m['preset']!r}")
        for v in self.raw["ablate"]["variants"]:
            if v not in VARIANTS:
                raise ConfigError(f"ablate.variants: unknown variant {v!r}")
        self.synth_config()
        self.train_config()

    def __getitem__(self, key):
        return self.raw[key]

    def synth_config(self):
        s = dict(self.raw["data"]["synth"])
        m = self.raw["model"]
        s["k"] = m["k"]
        s["aux_mode"] = m["aux_mode"]
        if m["preset"] == "paper224" and s["image_hw"] == 32:
            s["image_hw"] = 224
        return ActivityScriptConfig(**s)

    def train_config(self):
        try:
            return TrainConfig(**self.raw["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train section: {exc}") from None

    def preset(self, k=None):
        from .models import make_preset
        m = self.raw["model"]
        aux_channels = 2 if m["aux_mode"] == "frame_diff" else 1
        return make_preset(m["preset"], k=k or m["k"], aux_channels=aux_channels,
                           width_factor=m["width_factor"], noise_rate=m["noise_rate"])

    def to_dict(self):
        return copy.deepcopy(self.raw)
