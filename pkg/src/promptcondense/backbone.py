"""Frozen backbones: the seeded default and optional source-task pretraining."""

from __future__ import annotations

from pathlib import Path

from .data import SyntheticSpec, gen_synthetic
from .errors import ConfigError
from .training import MetricsLog, TrainConfig, pretrain_backbone
from .vit import ViTConfig, ViTParams, init_params, load_checkpoint, save_checkpoint

SOURCE_SPEC = SyntheticSpec(num_classes=16, train_per_class=40, val_per_class=10, test_per_class=0,
                            family="source", seed=1000)
PRETRAIN = TrainConfig(lr=1e-3, weight_decay=1e-4, epochs=15, batch_size=32, seed=0)


def default_backbone(config: ViTConfig | None = None, seed: int = 0) -> ViTParams:
    """Seeded random initialisation, frozen.

    With a frozen random backbone the prompts and head carry all of the
    task adaptation, which keeps the prompt-count trends measurable at toy
    scale.
    """
    params = init_params(config or ViTConfig(), seed)
    params.freeze_backbone()
    return params


def pretrain(config: ViTConfig | None = None, epochs: int | None = None, lr: float | None = None,
             seed: int = 0, log: MetricsLog | None = None) -> tuple[ViTParams, MetricsLog]:
    """Train every tensor of a fresh model on the coarse source grating task."""
    changes = {"seed": seed}
    if epochs is not None:
        changes["epochs"] = epochs
    if lr is not None:
        changes["lr"] = lr
    cfg = TrainConfig(**{**PRETRAIN.__dict__, **changes})
    return pretrain_backbone(config or ViTConfig(), gen_synthetic(SOURCE_SPEC), cfg, log)


def load_backbone(path: str | Path | None = None, config: ViTConfig | None = None, seed: int = 0) -> ViTParams:
    """Load a checkpoint, or build :func:`default_backbone` when ``path`` is empty."""
    if not path:
        return default_backbone(config, seed)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"backbone checkpoint {path} not found")
    params, _, _ = load_checkpoint(path)
    return params


def save_backbone(params: ViTParams, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, params, extra=extra)
    return path
