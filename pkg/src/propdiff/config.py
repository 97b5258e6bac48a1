"""Run configuration: defaults <- YAML file <- ``section.key=value`` overrides."""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import yaml

from .aligner import BioAligner
from .cvae import SequenceCVAE
from .diffusion import LatentDiffusion
from .metrics import PKA_EMBOSS

CONFIG_ENV = "PROPDIFF_CONFIG"


class ConfigError(ValueError):
    pass


def _estimator_defaults(cls, drop=("random_state",)) -> dict:
    return {k: v for k, v in cls().get_params().items() if k not in drop}


def default_config() -> dict:
    return {
        "seed": 0,
        "output_dir": ".",
        "log_level": "INFO",
        "featurizer": {"max_len": 128, "normalized": True, "table_path": None},
        "ingest": {"min_len": 10, "max_len": 128},
        "cvae": _estimator_defaults(SequenceCVAE, drop=("random_state", "checkpoint_path")),
        "aligner": _estimator_defaults(BioAligner),
        "diffusion": {**_estimator_defaults(LatentDiffusion), "sampled_latents": False},
        "generation": {"count": 10, "min_len": 10, "max_len": 128},
        "evaluation": {
            "ph": 7.4,
            "identity_threshold": 0.2,
            "score_threshold": 70.0,
            "histogram_bins": 30,
            "workers": 1,
            "pka": dict(PKA_EMBOSS),
        },
    }


_POSITIVE = {
    "featurizer": ("max_len",),
    "ingest": ("min_len", "max_len"),
    "cvae": ("latent_dim", "hidden_dim", "n_heads", "n_layers", "max_len", "learning_rate", "batch_size", "lr_step_epochs"),
    "aligner": ("text_dim", "shared_dim", "hidden_dim", "n_heads", "n_layers", "n_buckets", "temperature",
                "learning_rate", "batch_size", "lr_step_epochs", "hard_negative_k", "hard_negative_weight"),
    "diffusion": ("n_steps", "beta_start", "beta_end", "base_channels", "emb_dim", "n_heads",
                  "learning_rate", "batch_size", "lr_step_epochs"),
    "generation": ("min_len", "max_len"),
    "evaluation": ("histogram_bins", "workers"),
}
_NON_NEGATIVE = {
    "cvae": ("epochs", "kl_weight", "mu_norm_scale", "conv_depth", "save_every"),
    "aligner": ("epochs", "head_ridge"),
    "diffusion": ("epochs", "levels"),
    "generation": ("count",),
    "evaluation": ("identity_threshold",),
}
_UNIT_INTERVAL = {
    "cvae": ("lr_gamma",),
    "aligner": ("lr_gamma",),
    "diffusion": ("lr_gamma", "beta_end", "p_uncond"),
}
_CHOICES = {
    ("log_level",): ("DEBUG", "INFO", "WARNING", "ERROR"),
    ("cvae", "recon_loss"): ("mse", "ce"),
    ("cvae", "dtype"): ("float32", "float64"),
    ("aligner", "dtype"): ("float32", "float64"),
    ("diffusion", "dtype"): ("float32", "float64"),
    ("aligner", "temperature_mode"): ("learnable", "fixed"),
    ("diffusion", "schedule"): ("linear", "cosine"),
}


@dataclass
class RunConfig:
    data: dict = field(default_factory=default_config)

    def __getitem__(self, section):
        return self.data[section]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.data[name])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def _merge(base: dict, update: dict, path=()):
    for key, value in update.items():
        where = ".".join((*path, str(key)))
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict) and key != "pka":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a section, got {type(value).__name__}")
            _merge(base[key], value, (*path, key))
        else:
            base[key] = _coerce(where, base[key], value)


def _coerce(where: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        unknown = set(value) - set(default)
        if unknown:
            raise ConfigError(f"{where}.{sorted(unknown)[0]}: unknown key")
        return {**default, **{k: float(v) for k, v in value.items()}}
    return value


def validate(data: dict) -> None:
    def fail(where, msg, value):
        raise ConfigError(f"{where}: {msg}, got {value!r}")

    for section, keys in _POSITIVE.items():
        for k in keys:
            if data[section][k] <= 0:
                fail(f"{section}.{k}", "must be > 0", data[section][k])
    for section, keys in _NON_NEGATIVE.items():
        for k in keys:
            if data[section][k] < 0:
                fail(f"{section}.{k}", "must be >= 0", data[section][k])
    for section, keys in _UNIT_INTERVAL.items():
        for k in keys:
            v = data[section][k]
            if not 0 <= v <= 1:
                fail(f"{section}.{k}", "must lie in [0, 1]", v)
    for path, choices in _CHOICES.items():
        v = data
        for p in path:
            v = v[p]
        if v not in choices:
            fail(".".join(path), f"must be one of {choices}", v)
    for section in ("ingest", "generation"):
        if data[section]["min_len"] > data[section]["max_len"]:
            fail(f"{section}.min_len", "must not exceed max_len", data[section]["min_len"])
    if data["cvae"]["max_len"] % 2:
        fail("cvae.max_len", "must be even", data["cvae"]["max_len"])
    if data["diffusion"]["beta_start"] > data["diffusion"]["beta_end"]:
        fail("diffusion.beta_start", "must not exceed beta_end", data["diffusion"]["beta_start"])
    if not 0 <= data["evaluation"]["ph"] <= 14:
        fail("evaluation.ph", "must lie in [0, 14]", data["evaluation"]["ph"])
    if not isinstance(data["seed"], int) or data["seed"] < 0:
        fail("seed", "must be a non-negative integer", data["seed"])


def parse_override(text: str) -> dict:
    """``"cvae.kl_weight=0.9"`` -> ``{"cvae": {"kl_weight": 0.9}}`` (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Build and validate a config; ``path`` falls back to ``$PROPDIFF_CONFIG``."""
    data = default_config()
    path = path or os.environ.get(CONFIG_ENV) or None
    if path:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            _merge(data, loaded)
    for item in overrides:
        _merge(data, parse_override(item) if isinstance(item, str) else item)
    validate(data)
    return RunConfig(data)
