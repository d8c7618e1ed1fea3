"""Singular spectra and effective rank of traced attention matrices."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import derive_seed
from .errors import ContractError, DimensionError
from .prompts import DEEP, init_prompts, prompt_forward
from .training import TrainConfig, attach_head, train
from .vit import ViTParams


def singular_spectrum(a) -> np.ndarray:
    """Singular values of a square matrix in descending order."""
    a = np.asarray(a.data if hasattr(a, "data") else a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix has non-finite entries")
    return np.linalg.svd(a, compute_uv=False)


def cumulative_normalized(spectrum) -> np.ndarray:
    """``c_k = sum(s[:k]) / sum(s)`` for a nonnegative spectrum.

    Examples
    --------
    >>> cumulative_normalized([1.0, 1.0, 1.0, 1.0]).tolist()
    [0.25, 0.5, 0.75, 1.0]
    """
    s = np.asarray(spectrum, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ContractError("spectrum must be a nonempty vector")
    if np.any(s < 0):
        raise ContractError("spectrum must be nonnegative")
    total = s.sum()
    if total == 0.0:
        raise ContractError("all-zero spectrum cannot be normalized")
    return np.cumsum(s) / total


def _check_eps(eps: float) -> None:
    if not 0.0 < eps < 1.0:
        raise ContractError(f"eps must lie in (0, 1), got {eps}")


def rank_from_spectrum(s: np.ndarray, eps: float) -> int:
    """Smallest ``r`` whose discarded tail satisfies ``||tail||_2 <= eps * ||s||_2``."""
    _check_eps(eps)
    sq = np.asarray(s, dtype=np.float64) ** 2
    # tail[r] = energy of s[r:], so tail[0] is the total
    tail = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])
    bound = (eps ** 2) * tail[0]
    return max(1, int(np.argmax(tail <= bound)))


def effective_rank(a, eps: float = 0.1) -> int:
    """Rank of the shortest truncated SVD within relative Frobenius error ``eps``."""
    _check_eps(eps)
    return rank_from_spectrum(singular_spectrum(a), eps)


@dataclass
class SpectrumReport:
    """Singular spectra and cumulative curves per ``(layer, head)``.

    ``spectra[(l, h)]`` holds the spectrum averaged over traced samples.
    """

    spectra: dict[tuple[int, int], np.ndarray]
    tokens: list[int]

    def curves(self) -> dict[tuple[int, int], np.ndarray]:
        return {k: cumulative_normalized(s) for k, s in self.spectra.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "k", "sigma", "cumulative"])
        for (l, h), s in sorted(self.spectra.items()):
            c = cumulative_normalized(s)
            for k in range(len(s)):
                w.writerow([l, h, k + 1, repr(float(s[k])), repr(float(c[k]))])
        return buf.getvalue()


def spectrum_report(trace) -> SpectrumReport:
    """Average singular spectrum of every traced ``(layer, head)`` over samples."""
    spectra = {}
    for l, a in enumerate(trace.entries):
        sv = np.linalg.svd(a, compute_uv=False)  # (B, H, t)
        for h in range(a.shape[1]):
            spectra[(l, h)] = sv[:, h].mean(axis=0)
    return SpectrumReport(spectra, list(trace.tokens))


def trace_ranks(trace, eps: float) -> np.ndarray:
    """Effective ranks of every traced matrix, flattened over layers, heads and samples."""
    out = []
    for a in trace.entries:
        sv = np.linalg.svd(a, compute_uv=False)
        out.extend(rank_from_spectrum(s, eps) for s in sv.reshape(-1, sv.shape[-1]))
    return np.array(out, dtype=np.int64)


@dataclass
class RankGrowthReport:
    """Effective rank against prompt count.

    ``per_seed[i][j]`` is the mean rank for seed ``i`` at ``m_values[j]``;
    ``std[j]`` pools every traced matrix of every seed.
    """

    m_values: list[int]
    eps: float
    per_seed: list[list[float]] = field(default_factory=list)
    std: list[float] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)

    @property
    def mean(self) -> list[float]:
        return np.mean(np.asarray(self.per_seed), axis=0).tolist() if self.per_seed else []

    @property
    def increments(self) -> list[float]:
        """Raw rank change between consecutive prompt counts."""
        return np.diff(self.mean).tolist()

    @property
    def slopes(self) -> list[float]:
        """Rank change per added prompt; comparable across uneven ``m`` steps."""
        return (np.diff(self.mean) / np.diff(self.m_values)).tolist()

    def concavity(self) -> float:
        """Fraction of consecutive slope pairs that do not increase (1.0 with < 2 slopes)."""
        s = self.slopes
        pairs = list(zip(s[:-1], s[1:]))
        return sum(b <= a for a, b in pairs) / len(pairs) if pairs else 1.0

    def ordered_slope_pairs(self) -> tuple[int, int]:
        """``(non_increasing, total)`` over every slope pair ``i < j``."""
        s = self.slopes
        pairs = [(s[i], s[j]) for i in range(len(s)) for j in range(i + 1, len(s))]
        return sum(b <= a for a, b in pairs), len(pairs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "tokens", "mean_rank", "std_rank", "increment", "slope"])
        inc = [""] + [repr(v) for v in self.increments]
        slope = [""] + [repr(v) for v in self.slopes]
        for j, m in enumerate(self.m_values):
            w.writerow([m, self.tokens[j], repr(self.mean[j]), repr(self.std[j]), inc[j], slope[j]])
        return buf.getvalue()


def rank_growth_experiment(backbone: ViTParams, dataset, m_list, eps: float = 0.1, seeds=(0, 1, 2),
                           train_cfg: TrainConfig | None = None, samples: int = 16) -> RankGrowthReport:
    """Train VPT-Deep at each prompt count and measure effective attention rank.

    For every seed and every ``m`` in ``m_list`` a fresh head and ``m``
    prompts per layer are trained on ``dataset``; the first ``samples`` test
    images (validation if there is no test split) are then traced and the
    effective rank of every ``(layer, head, sample)`` attention matrix is
    averaged.
    """
    _check_eps(eps)
    m_list = [int(m) for m in m_list]
    if not m_list or any(m < 0 for m in m_list):
        raise ContractError("m_list must be nonempty and nonnegative")
    if any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise ContractError("m_list must be strictly increasing")
    train_cfg = train_cfg or TrainConfig(epochs=10)
    images, _ = dataset.subset("test")
    if len(images) == 0:
        images, _ = dataset.subset("val")
    images = images[:samples]
    if len(images) == 0:
        raise ContractError("rank-growth experiment needs evaluation samples")
    report = RankGrowthReport(m_list, eps)
    all_ranks: dict[int, list[np.ndarray]] = {m: [] for m in m_list}
    for seed in seeds:
        row = []
        for m in m_list:
            params = attach_head(backbone, dataset.num_classes)
            ps = init_prompts(params.config, DEEP, m, derive_seed(seed, f"prompts/{m}"))
            if train_cfg.epochs:
                cfg = TrainConfig(**{**train_cfg.__dict__, "seed": derive_seed(seed, f"train/{m}")})
                train(params, ps, dataset, cfg)
            with T.no_grad():
                _, tr = prompt_forward(images, params, ps, trace=True)
            ranks = trace_ranks(tr, eps)
            all_ranks[m].append(ranks)
            row.append(float(ranks.mean()))
        report.per_seed.append(row)
    report.std = [float(np.concatenate(all_ranks[m]).std()) for m in m_list]
    report.tokens = [backbone.config.num_tokens + m for m in m_list]
    return report
