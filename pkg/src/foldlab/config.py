"""Strict INI pipeline configuration: sections mirror the pipeline stages,
unknown sections or keys are rejected, and the resolved config has a stable
hash for artifact manifests."""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"invalid boolean {v!r}")


def _lambda_resource(v):
    if str(v).strip().lower() == "auto":
        return None
    x = float(v)
    if x < 0:
        raise ConfigError(f"gate.lambda_resource must be >= 0 or 'auto', got {v}")
    return x


# section -> key -> (parser, default); a default of REQUIRED must be supplied.
REQUIRED = object()
SCHEMA = {
    "model": {
        "n_layers": (int, 12), "d_model": (int, 128), "n_heads": (int, 4),
        "d_ff": (int, 512), "max_seq": (int, 256),
    },
    "train": {
        "steps": (int, 1000), "lr": (float, 1.5e-3), "batch_size": (int, 8),
        "seq_len": (int, 64),
    },
    "gate": {
        "lambda_resource": (_lambda_resource, None), "steps": (int, 1000),
        "eps0": (float, 0.1), "decay": (float, 0.97), "decay_interval": (int, 120),
        "batch_size": (int, 4), "seq_len": (int, 48), "lr": (float, 0.05),
        "momentum": (float, 0.9), "escalation": (float, 2.0),
    },
    "fold": {
        "removal_ratio": (float, 0.25), "fold_ratio": (float, 0.1), "group_size": (int, 2),
    },
    "recovery": {
        "lr": (float, 1e-5), "warmup_steps": (int, 100), "batch_size": (int, 32),
        "epochs": (int, 2), "lambda_distill": (float, 1e-5), "lora_rank": (int, 8),
        "freeze_child_norms": (_bool, False), "max_train_tokens": (int, 0),
    },
    "eval": {
        "seq_len": (int, 64),
    },
    "paths": {
        "corpus": (str, REQUIRED), "workdir": (str, ""),
    },
    "run": {
        "seed": (int, 0),
    },
}


@dataclass
class PipelineConfig:
    values: dict  # section -> key -> parsed value

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values["run"]["seed"]

    @property
    def workdir(self):
        wd = self.values["paths"]["workdir"] or os.environ.get("FOLDLAB_WORKDIR", "")
        if not wd:
            raise ConfigError("no workdir: set paths.workdir or FOLDLAB_WORKDIR")
        return wd

    def canonical(self):
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key]!r}")
        return "\n".join(lines)

    def config_hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def validate_ratios(self):
        for key in ("removal_ratio", "fold_ratio"):
            v = self.values["fold"][key]
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"fold.{key} must be in [0, 1), got {v}")


def _apply(values, section, key, raw):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    parser, _default = SCHEMA[section][key]
    try:
        values[section][key] = parser(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {section}.{key}: {raw!r} ({exc})") from None


def load_config(path, overrides=(), seed=None):
    """Parse an INI config with strict keys; apply --set section.key=value
    overrides and an optional --seed, then check required keys."""
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    parser = configparser.ConfigParser()
    parser.optionxform = str  # case-sensitive keys
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in parser.sections():
        for key, raw in parser[section].items():
            _apply(values, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(values, section, key, raw)
    if seed is not None:
        values["run"]["seed"] = int(seed)
    for section, keys in values.items():
        for key, v in keys.items():
            if v is REQUIRED:
                raise ConfigError(f"missing required config key {section}.{key}")
    cfg = PipelineConfig(values)
    cfg.validate_ratios()
    return cfg
