"""
Prompt condensation: importance scoring, top-k selection and the
train / score / select / fine-tune pipeline.

Scores estimate how much the loss changes when a prompt is zeroized. The
first-order estimate for prompt ``p_i`` on sample ``x`` is
``<dL(x)/dp_i, p_i>``; its absolute value is averaged over samples.
Selection then removes the low-scoring tokens outright so the sequence
(and the FLOPs) actually shrink.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, PromptLookupError
from .prompts import DEEP, PromptId, PromptSet, prompt_forward
from .tensor import Tensor
from .training import MetricsLog, TrainConfig, evaluate, train
from .vit import ViTParams, forward

INNER = "inner"
ELEMENTWISE = "elementwise"
GLOBAL = "global"
LOCAL = "local"
CLS_SIM = "cls-sim"
TIE_BREAK = "score desc, layer asc, slot asc"


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class ScoreTable:
    """Importance score for every prompt identity.

    Attributes
    ----------
    entries
        ``{(layer, slot): score}``; scores are finite and nonnegative.
    method
        ``"taylor-inner"``, ``"taylor-elementwise"`` or ``"cls-sim"``.
    num_samples
        Number of samples averaged over.
    """

    entries: dict[PromptId, float]
    method: str
    num_samples: int
    seed: int = 0

    def __post_init__(self):
        self.entries = {(int(l), int(j)): float(s) for (l, j), s in self.entries.items()}
        bad = [k for k, s in self.entries.items() if not (math.isfinite(s) and s >= 0.0)]
        if bad:
            raise ContractError(f"scores must be finite and nonnegative; offending ids {bad[:5]}")

    def __len__(self) -> int:
        return len(self.entries)

    def layers(self) -> list[int]:
        return sorted({l for l, _ in self.entries})

    def check_covers(self, promptset: PromptSet) -> None:
        ids = promptset.identities()
        if len(ids) != len(self.entries) or set(ids) != set(self.entries):
            raise ContractError("score table does not cover the prompt set exactly once")

    def to_dict(self) -> dict:
        rows = [{"layer": l, "slot": j, "score": s} for (l, j), s in sorted(self.entries.items())]
        return {"method": self.method, "num_samples": self.num_samples, "seed": self.seed, "entries": rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreTable":
        try:
            entries = {(r["layer"], r["slot"]): r["score"] for r in data["entries"]}
            return cls(entries, data["method"], int(data["num_samples"]), int(data.get("seed", 0)))
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed score table: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ScoreTable":
        return cls.from_dict(json.loads(text))


@dataclass
class CondensationPlan:
    """The set of prompt identities that survive condensation.

    ``layer_sizes`` records the per-layer prompt counts the plan was made
    from, so kept counts per layer can be reported without the prompt set.
    """

    keep: frozenset
    k_percent: float
    method: str
    layer_sizes: list[int] = field(default_factory=list)
    tie_break: str = TIE_BREAK

    def __post_init__(self):
        self.keep = frozenset((int(l), int(j)) for l, j in self.keep)

    def kept_per_layer(self) -> list[int]:
        counts = [0] * len(self.layer_sizes)
        for l, _ in self.keep:
            counts[l] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "k_percent": self.k_percent,
            "tie_break": self.tie_break,
            "layer_sizes": list(self.layer_sizes),
            "kept_per_layer": self.kept_per_layer(),
            "keep": [list(i) for i in sorted(self.keep)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "CondensationPlan":
        try:
            return cls(frozenset(tuple(i) for i in data["keep"]), float(data["k_percent"]), data["method"],
                       list(data.get("layer_sizes", [])), data.get("tie_break", TIE_BREAK))
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed plan: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "CondensationPlan":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Taylor scoring
# ---------------------------------------------------------------------------


def _contribution(grad: np.ndarray, p: np.ndarray, variant: str) -> np.ndarray:
    """Per-sample first-order terms; ``grad`` is ``(..., m, d)``, ``p`` is ``(m, d)``."""
    if variant == INNER:
        return np.abs(np.sum(grad * p, axis=-1))
    if variant == ELEMENTWISE:
        return np.sqrt(np.sum((grad * p) ** 2, axis=-1))
    raise ContractError(f"unknown Taylor variant {variant!r}")


def taylor_scores(loss_fn: Callable[[list[Tensor], int], Tensor], prompts: Sequence[np.ndarray],
                  num_samples: int, variant: str = INNER) -> list[np.ndarray]:
    """Reference scorer: one backward pass per sample.

    Parameters
    ----------
    loss_fn
        ``loss_fn(leaves, i)`` returns the scalar loss of sample ``i`` given
        fresh leaf tensors holding the prompt matrices.
    prompts
        Prompt matrices ``(m_l, d)``.

    Returns
    -------
    list of arrays
        Per-layer score vectors, the sample mean of the absolute
        first-order term.
    """
    if num_samples <= 0:
        raise ContractError("scoring needs a nonempty dataset")
    prompts = [np.asarray(p, dtype=np.float64) for p in prompts]
    totals = [np.zeros(p.shape[0]) for p in prompts]
    for i in range(num_samples):
        leaves = [Tensor(p, requires_grad=True) for p in prompts]
        T.backward(loss_fn(leaves, i))
        for l, (leaf, p) in enumerate(zip(leaves, prompts)):
            g = leaf.grad if leaf.grad is not None else np.zeros_like(p)
            totals[l] += _contribution(g, p, variant)
    return [t / num_samples for t in totals]


def zeroize_delta(loss_fn: Callable[[list[Tensor]], Tensor], prompts: Sequence[np.ndarray],
                  pid: tuple[int, int]) -> float:
    """``|L(P with row pid zeroed) - L(P)|`` from two exact evaluations of ``loss_fn``."""
    prompts = [np.asarray(p, dtype=np.float64) for p in prompts]
    layer, row = pid
    if not (0 <= layer < len(prompts) and 0 <= row < prompts[layer].shape[0]):
        raise PromptLookupError(f"unknown prompt identity {tuple(pid)}")
    zeroed = [p.copy() for p in prompts]
    zeroed[layer][row] = 0.0
    with T.no_grad():
        full = loss_fn([Tensor(p) for p in prompts]).item()
        cut = loss_fn([Tensor(p) for p in zeroed]).item()
    return abs(cut - full)


def _split_data(dataset, split: str) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple):
        images, labels = dataset
    else:
        images, labels = dataset.subset(split)
    return np.asarray(images, dtype=np.float64), np.asarray(labels)


def _table(promptset: PromptSet, per_layer: list[np.ndarray], method: str, n: int, seed: int) -> ScoreTable:
    entries = {}
    for ids, scores in zip(promptset.ids, per_layer):
        for pid, s in zip(ids, scores):
            entries[pid] = float(s)
    return ScoreTable(entries, method, n, seed)


def score_taylor(params: ViTParams, promptset: PromptSet, dataset, variant: str = INNER,
                 split: str = "train", batch_size: int = 32, seed: int = 0) -> ScoreTable:
    """First-order Taylor importance of every prompt.

    Each batch is run with per-sample prompt copies of shape
    ``(B, m_l, d)`` as the gradient leaves and a summed loss, so row ``b``
    of a leaf gradient is exactly the gradient of sample ``b``'s own loss.
    Dropout is off and neither the prompts nor the model are modified.

    Parameters
    ----------
    dataset
        A :class:`~promptcondense.data.Dataset` (``split`` is used) or an
        ``(images, labels)`` pair.
    variant
        ``"inner"`` takes ``|<g, p>|``; ``"elementwise"`` takes
        ``||g * p||_2``.
    """
    images, labels = _split_data(dataset, split)
    n = len(labels)
    if n == 0:
        raise ContractError("scoring needs a nonempty dataset")
    if variant not in (INNER, ELEMENTWISE):
        raise ContractError(f"unknown Taylor variant {variant!r}")
    mats = [p.data for p in promptset.layers]
    totals = [np.zeros(p.shape[0]) for p in mats]
    for start in range(0, n, batch_size):
        x, y = images[start:start + batch_size], labels[start:start + batch_size]
        b = len(y)
        leaves = [Tensor(np.broadcast_to(p, (b,) + p.shape).copy(), requires_grad=True) for p in mats]
        tensors = [leaf if leaf.shape[1] else None for leaf in leaves]
        logits, _ = forward(x, params, tensors, mode=promptset.mode)
        T.backward(T.cross_entropy(logits, y, reduction="sum"))
        for l, (leaf, p) in enumerate(zip(leaves, mats)):
            if leaf.grad is not None and p.shape[0]:
                totals[l] += _contribution(leaf.grad, p[None], variant).sum(axis=0)
    return _table(promptset, [t / n for t in totals], f"taylor-{variant}", n, seed)


def dataset_loss(params: ViTParams, promptset: PromptSet | None, images: np.ndarray, labels: np.ndarray,
                 batch_size: int = 128) -> float:
    """Mean cross-entropy over all samples with dropout off."""
    total = 0.0
    with T.no_grad():
        for start in range(0, len(labels), batch_size):
            logits, _ = prompt_forward(images[start:start + batch_size], params, promptset)
            total += T.cross_entropy(logits, labels[start:start + batch_size], reduction="sum").item()
    return total / len(labels)


def leave_one_out_oracle(params: ViTParams, promptset: PromptSet, dataset, pid: PromptId,
                         split: str = "train") -> float:
    """Exact loss change from zeroizing one prompt (the token stays in place)."""
    layer, row = promptset.locate(pid)
    images, labels = _split_data(dataset, split)
    if len(labels) == 0:
        raise ContractError("scoring needs a nonempty dataset")
    zeroed = promptset.copy()
    zeroed.layers[layer].data = zeroed.layers[layer].data.copy()
    zeroed.layers[layer].data[row] = 0.0
    return abs(dataset_loss(params, zeroed, images, labels) - dataset_loss(params, promptset, images, labels))


def score_cls_sim(params: ViTParams, promptset: PromptSet, dataset, split: str = "train",
                  batch_size: int = 64, seed: int = 0) -> ScoreTable:
    """Mean post-softmax attention from the class token to each prompt.

    The score of prompt ``(l, j)`` averages ``A[cls, j]`` of layer ``l``
    over samples and heads. In shallow mode the prompts live in layer 0.
    """
    images, labels = _split_data(dataset, split)
    n = len(labels)
    if n == 0:
        raise ContractError("scoring needs a nonempty dataset")
    totals = [np.zeros(c) for c in promptset.counts()]
    with T.no_grad():
        for start in range(0, n, batch_size):
            _, tr = prompt_forward(images[start:start + batch_size], params, promptset, trace=True)
            for l, m in enumerate(promptset.counts()):
                if m == 0:
                    continue
                a = tr.entries[l]
                cls = tr.cls_index[l]
                totals[l] += a[:, :, cls, :m].mean(axis=1).sum(axis=0)
    return _table(promptset, [t / n for t in totals], CLS_SIM, n, seed)


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _check_k(k_percent: float) -> None:
    if not (0.0 < k_percent <= 100.0) or math.isnan(k_percent):
        raise ContractError(f"k must be in (0, 100], got {k_percent}")


def _layer_sizes(scores: ScoreTable) -> list[int]:
    if not scores.entries:
        return []
    sizes = [0] * (max(l for l, _ in scores.entries) + 1)
    for l, _ in scores.entries:
        sizes[l] += 1
    return sizes


def _ranked(items) -> list[PromptId]:
    return [pid for pid, _ in sorted(items, key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))]


def select_global(scores: ScoreTable, k_percent: float, method: str = GLOBAL) -> CondensationPlan:
    """Keep the top ``k%`` of prompts pooled across all layers (at least one)."""
    _check_k(k_percent)
    total = len(scores)
    n_keep = min(total, max(1, round_half_up(k_percent / 100.0 * total))) if total else 0
    keep = _ranked(scores.entries.items())[:n_keep]
    return CondensationPlan(frozenset(keep), k_percent, method, _layer_sizes(scores))


def select_local(scores: ScoreTable, k_percent: float) -> CondensationPlan:
    """Keep the top ``k%`` of prompts inside every layer separately."""
    _check_k(k_percent)
    by_layer: dict[int, list] = {}
    for pid, s in scores.entries.items():
        by_layer.setdefault(pid[0], []).append((pid, s))
    keep = []
    for items in by_layer.values():
        keep.extend(_ranked(items)[:round_half_up(k_percent / 100.0 * len(items))])
    return CondensationPlan(frozenset(keep), k_percent, LOCAL, _layer_sizes(scores))


def apply_plan(promptset: PromptSet, plan: CondensationPlan) -> PromptSet:
    """Drop every prompt not in ``plan.keep``; survivors keep values and identities."""
    known = set(promptset.identities())
    unknown = sorted(plan.keep - known)
    if unknown:
        raise PromptLookupError(f"plan keeps unknown prompt identities {unknown[:5]}")
    layers, ids = [], []
    for p, lid in zip(promptset.layers, promptset.ids):
        rows = [j for j, pid in enumerate(lid) if pid in plan.keep]
        layers.append(Tensor(p.data[rows], requires_grad=p.requires_grad))
        ids.append([lid[j] for j in rows])
    return PromptSet(promptset.mode, layers, ids)


def select(scores: ScoreTable, k_percent: float, method: str) -> CondensationPlan:
    if method == LOCAL:
        return select_local(scores, k_percent)
    if method in (GLOBAL, CLS_SIM):
        return select_global(scores, k_percent, method)
    raise ContractError(f"unknown selection method {method!r}")


def score(params: ViTParams, promptset: PromptSet, dataset, method: str, variant: str = INNER,
          seed: int = 0) -> ScoreTable:
    """Taylor scores for ``global``/``local``; attention scores for ``cls-sim``."""
    if method == CLS_SIM:
        return score_cls_sim(params, promptset, dataset, seed=seed)
    if method in (GLOBAL, LOCAL):
        return score_taylor(params, promptset, dataset, variant, seed=seed)
    raise ContractError(f"unknown selection method {method!r}")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CondenseConfig:
    """Settings for :func:`condense_pipeline`.

    ``train`` drives the first stage; fine-tuning reuses it with
    ``finetune_epochs`` epochs, a tenth of the learning rate and dropout off.
    """

    train: TrainConfig = TrainConfig()
    k_percent: float = 30.0
    method: str = GLOBAL
    finetune_epochs: int = 20
    variant: str = INNER
    skip_training: bool = False


def condense(params: ViTParams, promptset: PromptSet, dataset, cfg: CondenseConfig,
             log: MetricsLog | None = None) -> tuple[PromptSet, MetricsLog, ScoreTable, CondensationPlan]:
    """Score, select and fine-tune an already trained prompt set.

    The input prompt set is left untouched; the condensed copy is returned.
    """
    log = log if log is not None else MetricsLog()
    t0 = time.perf_counter()
    scores = score(params, promptset, dataset, cfg.method, cfg.variant, seed=cfg.train.seed)
    plan = select(scores, cfg.k_percent, cfg.method)
    condensed = apply_plan(promptset, plan)
    log.stage_times["score"] = time.perf_counter() - t0
    log.layer_counts["before"] = promptset.counts()
    log.layer_counts["after"] = condensed.counts()
    log.results["condensed_no_finetune_test_acc"] = _test_acc(params, condensed, dataset)
    train(params, condensed, dataset, cfg.train.for_finetune(cfg.finetune_epochs), log)
    log.results["condensed_test_acc"] = _test_acc(params, condensed, dataset)
    return condensed, log, scores, plan


def _test_acc(params: ViTParams, promptset: PromptSet, dataset) -> float:
    images, labels = dataset.subset("test")
    return evaluate(params, promptset, images, labels)["acc"] if len(labels) else float("nan")


def condense_pipeline(params: ViTParams, promptset: PromptSet, dataset, cfg: CondenseConfig,
                      log: MetricsLog | None = None) -> tuple[PromptSet, MetricsLog]:
    """Train prompts, score them, keep the top ``k%`` and fine-tune the survivors.

    ``promptset`` is trained in place during the first stage (skipped when
    ``cfg.skip_training``); the condensed set is a new object. Backbone
    tensors are frozen throughout. Metrics carry per-epoch records of both
    stages, layer-wise prompt counts, test accuracies and stage wall times.
    """
    log = log if log is not None else MetricsLog()
    if promptset.mode != DEEP and cfg.method == LOCAL:
        raise ContractError("local selection needs per-layer prompts (deep mode)")
    if not cfg.skip_training:
        train(params, promptset, dataset, cfg.train, log)
    log.results["full_test_acc"] = _test_acc(params, promptset, dataset)
    condensed, log, scores, plan = condense(params, promptset, dataset, cfg, log)
    log.results["kept"] = len(plan.keep)
    log.results["total"] = promptset.total
    return condensed, log
