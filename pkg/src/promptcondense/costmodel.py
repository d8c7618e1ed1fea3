"""Closed-form multiply-accumulate counts for a ViT carrying deep prompts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .errors import ContractError


@dataclass(frozen=True)
class CostConfig:
    """Dimensions entering the cost formula.

    ``tokens`` is ``n``, the sequence length without prompts (patches plus
    the class token); ``patches`` is the number of embedded patches.
    """

    depth: int
    dim: int
    tokens: int
    patches: int
    patch_size: int
    channels: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("depth", "dim", "tokens", "patches", "patch_size", "channels", "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be a positive integer")
        if self.patches > self.tokens:
            raise ContractError("patches cannot exceed tokens")


PRESETS = {
    "vitb16": CostConfig(depth=12, dim=768, tokens=197, patches=196, patch_size=16),
    "toy": CostConfig(depth=4, dim=64, tokens=17, patches=16, patch_size=8),
}


def preset(name: str) -> CostConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown cost preset {name!r}; choose from {sorted(PRESETS)}") from None


def from_vit(config) -> CostConfig:
    """Cost dimensions of a :class:`~promptcondense.vit.ViTConfig`."""
    return CostConfig(config.depth, config.dim, config.num_tokens, config.num_patches, config.patch_size,
                      config.channels, config.mlp_ratio)


def layer_flops(cfg: CostConfig, t: int) -> int:
    """One encoder layer over ``t`` tokens.

    Projections cost ``4 t d^2`` (Q, K, V, output), the MLP
    ``2 * mlp_ratio * t d^2`` and the two attention products ``2 t^2 d``.
    """
    d = cfg.dim
    return (4 + 2 * cfg.mlp_ratio) * t * d * d + 2 * t * t * d


def embed_flops(cfg: CostConfig) -> int:
    return cfg.patches * cfg.dim * cfg.channels * cfg.patch_size ** 2


def _counts(cfg: CostConfig, m) -> list[int]:
    counts = [m] * cfg.depth if isinstance(m, (int, float)) else list(m)
    if len(counts) != cfg.depth:
        raise ContractError(f"expected {cfg.depth} per-layer prompt counts, got {len(counts)}")
    if any(int(c) != c or c < 0 for c in counts):
        raise ContractError("prompt counts must be nonnegative integers")
    return [int(c) for c in counts]


def condensed_flops(cfg: CostConfig, per_layer_counts) -> int:
    """Total MACs with ``per_layer_counts[l]`` prompts in layer ``l``."""
    counts = _counts(cfg, per_layer_counts)
    if isinstance(per_layer_counts, (int, float)):
        raise ContractError("condensed_flops takes a per-layer list")
    return embed_flops(cfg) + sum(layer_flops(cfg, cfg.tokens + m) for m in counts)


def vit_flops(cfg: CostConfig, m=0) -> int:
    """Total MACs with ``m`` prompts in every layer (or a per-layer list)."""
    return embed_flops(cfg) + sum(layer_flops(cfg, cfg.tokens + c) for c in _counts(cfg, m))


def overhead_percent(cfg: CostConfig, m=0) -> float:
    base = vit_flops(cfg, 0)
    return 100.0 * (vit_flops(cfg, m) - base) / base


def pc_advisor(n: int, m: int, threshold: float) -> dict:
    """Prompt-to-image token ratio and whether condensation is worth applying.

    Examples
    --------
    >>> pc_advisor(197, 100, 50.0)["apply"]
    True
    """
    if n <= 0:
        raise ContractError("n must be positive")
    if m < 0:
        raise ContractError("m must be nonnegative")
    overhead = 100.0 * m / n
    return {"n": n, "m": m, "threshold": threshold, "overhead_percent": overhead,
            "apply": bool(m > 0 and overhead >= threshold)}


@dataclass
class CostReport:
    config: CostConfig
    m: list[int]
    flops_total: int
    overhead_percent: float
    advice: dict | None = None

    @property
    def gflops(self) -> float:
        return self.flops_total / 1e9

    def to_dict(self) -> dict:
        out = {"config": asdict(self.config), "m": self.m, "flops_total": self.flops_total,
               "gflops": self.gflops, "overhead_percent": self.overhead_percent}
        if self.advice is not None:
            out["advice"] = self.advice
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def cost_report(cfg: CostConfig, m=0, threshold: float | None = None) -> CostReport:
    counts = _counts(cfg, m)
    flops = condensed_flops(cfg, counts)
    base = vit_flops(cfg, 0)
    advice = None
    if threshold is not None:
        advice = pc_advisor(cfg.tokens, max(counts), threshold)
    return CostReport(cfg, counts, flops, 100.0 * (flops - base) / base, advice)
