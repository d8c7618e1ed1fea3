"""
Flat experiment configuration and seed splitting.

Config files are INI documents whose sections map onto key prefixes: key
``epochs`` under ``[train]`` is addressed as ``train.epochs``. Command-line
``--set key=value`` overrides are applied after the file. Unknown keys and
unparsable values raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError


def derive_seed(seed: int, tag: str) -> int:
    """Deterministically split a global seed into a named component stream.

    ``SeedSequence([seed, crc32(tag)])`` produces two 32-bit words that are
    packed into a 63-bit integer. Different tags give independent streams.
    """
    words = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode("utf-8"))]).generate_state(2)
    return int((int(words[0]) << 31) ^ int(words[1])) & ((1 << 63) - 1)


def rng_for(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag))


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    doc: str


def _intlist(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text).strip()
    return [int(v) for v in text.replace(";", ",").split(",") if v.strip()] if text else []


SCHEMA: dict[str, Key] = {
    "run.seed": Key(int, 0, "global seed; component seeds derive from it"),
    "run.out": Key(str, "out", "artifact directory"),
    "model.image_size": Key(int, 32, "input resolution (square)"),
    "model.patch_size": Key(int, 8, "patch edge in pixels"),
    "model.channels": Key(int, 3, "image channels"),
    "model.depth": Key(int, 4, "encoder layers L"),
    "model.dim": Key(int, 64, "embedding width d"),
    "model.heads": Key(int, 4, "attention heads H"),
    "model.mlp_ratio": Key(int, 4, "FFN expansion factor"),
    "model.dropout": Key(float, 0.1, "dropout rate during VPT training"),
    "model.backbone": Key(str, "", "backbone checkpoint path; empty means a seeded random initialisation"),
    "model.backbone_seed": Key(int, 0, "seed of the default backbone (independent of run.seed)"),
    "model.pretrain_epochs": Key(int, 15, "epochs for backbone pretraining on the source task"),
    "model.pretrain_lr": Key(float, 1e-3, "Adam step size for backbone pretraining"),
    "data.path": Key(str, "", "dataset file; empty means generate synthetic data"),
    "data.format": Key(str, "auto", "bin | csv | auto (by extension)"),
    "data.classes": Key(int, 8, "synthetic classes"),
    "data.train_per_class": Key(int, 100, "synthetic training samples per class"),
    "data.val_per_class": Key(int, 25, "synthetic validation samples per class"),
    "data.test_per_class": Key(int, 50, "synthetic test samples per class"),
    "data.noise": Key(float, 1.0, "synthetic nuisance level"),
    "data.family": Key(str, "target", "synthetic pattern family: source | target"),
    "prompts.mode": Key(str, "deep", "deep | shallow"),
    "prompts.per_layer": Key(int, 10, "prompts per layer before condensation"),
    "train.epochs": Key(int, 100, "VPT training epochs N_v"),
    "train.lr": Key(float, 0.1, "base learning rate"),
    "train.momentum": Key(float, 0.9, "SGD momentum"),
    "train.weight_decay": Key(float, 0.0, "L2 weight decay"),
    "train.batch_size": Key(int, 32, "minibatch size"),
    "train.schedule": Key(str, "cosine", "cosine | constant"),
    "condense.k": Key(float, 30.0, "percentage of prompts kept"),
    "condense.method": Key(str, "global", "global | local | cls-sim"),
    "condense.finetune_epochs": Key(int, 20, "fine-tuning epochs N_p"),
    "condense.variant": Key(str, "inner", "Taylor score variant: inner | elementwise"),
    "spectral.eps": Key(float, 0.1, "relative Frobenius tolerance for effective rank"),
    "spectral.m_list": Key(_intlist, [0, 16, 32, 64], "prompt counts for the rank-growth sweep"),
    "spectral.seeds": Key(int, 3, "seeds for the rank-growth sweep"),
    "spectral.epochs": Key(int, 10, "VPT epochs per sweep point"),
    "spectral.samples": Key(int, 16, "evaluation samples traced per sweep point"),
    "cost.preset": Key(str, "vitb16", "vitb16 | toy | custom"),
    "cost.prompts": Key(str, "0", "prompt count, or comma-separated per-layer counts"),
    "cost.threshold": Key(float, 50.0, "overhead percentage K above which condensation is advised"),
}


def defaults() -> dict[str, Any]:
    return {k: (list(v.default) if isinstance(v.default, list) else v.default) for k, v in SCHEMA.items()}


def _coerce(key: str, value: Any) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    typ = SCHEMA[key].type
    try:
        if typ is bool:
            return str(value).lower() in ("1", "true", "yes", "on")
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r} for {key}: {exc}") from exc


def load_config(path: str | Path | None = None, overrides: list[str] | dict | None = None) -> dict[str, Any]:
    """Defaults, then the INI file at ``path``, then ``overrides``."""
    cfg = defaults()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for name, value in parser.items(section):
                key = f"{section}.{name}"
                cfg[key] = _coerce(key, value)
    items = overrides.items() if isinstance(overrides, dict) else [_split(o) for o in overrides or []]
    for key, value in items:
        cfg[key] = _coerce(key, value)
    return cfg


def _split(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def dump_config(cfg: dict[str, Any]) -> str:
    """Render ``cfg`` back to INI text (sections and keys sorted)."""
    sections: dict[str, dict[str, str]] = {}
    for key in sorted(cfg):
        section, name = key.split(".", 1)
        value = cfg[key]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        sections.setdefault(section, {})[name] = str(value)
    lines = []
    for section, items in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in items.items())
        lines.append("")
    return "\n".join(lines)
