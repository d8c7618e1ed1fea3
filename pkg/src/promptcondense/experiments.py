"""Toy-scale experiment protocols: prompt-count sweeps, condensation studies, score fidelity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import condense as C
from .backbone import default_backbone
from .config import derive_seed
from .data import Dataset, SyntheticSpec, gen_synthetic
from .prompts import DEEP, PromptSet, init_prompts
from .training import TrainConfig, attach_head, evaluate, train
from .vit import ViTConfig, ViTParams


@dataclass(frozen=True)
class ToyProtocol:
    """Fixed recipe for the synthetic-task experiments.

    One run seed fans out into the dataset, prompt initialisation and
    training streams; the frozen backbone depends only on ``backbone_seed``.
    """

    train_per_class: int = 32
    val_per_class: int = 8
    test_per_class: int = 40
    num_classes: int = 8
    noise: float = 1.0
    epochs: int = 30
    lr: float = 0.1
    per_layer: int = 10
    finetune_epochs: int = 20
    backbone_seed: int = 0
    mode: str = DEEP

    def dataset(self, seed: int) -> Dataset:
        return gen_synthetic(SyntheticSpec(
            num_classes=self.num_classes, train_per_class=self.train_per_class,
            val_per_class=self.val_per_class, test_per_class=self.test_per_class,
            noise=self.noise, seed=derive_seed(seed, "data")))

    def model(self) -> ViTParams:
        return attach_head(default_backbone(ViTConfig(), self.backbone_seed), self.num_classes)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, seed=derive_seed(seed, "train"))

    def trained(self, seed: int, per_layer: int | None = None,
                dataset: Dataset | None = None) -> tuple[ViTParams, PromptSet, Dataset]:
        """Prompt-tune a fresh head and ``per_layer`` prompts per layer."""
        ds = dataset if dataset is not None else self.dataset(seed)
        params = self.model()
        m = self.per_layer if per_layer is None else per_layer
        ps = init_prompts(params.config, self.mode, m, derive_seed(seed, "prompts"))
        train(params, ps, ds, self.train_config(seed))
        return params, ps, ds


def heldout_accuracy(params: ViTParams, promptset: PromptSet | None, ds: Dataset) -> float:
    return evaluate(params, promptset, *ds.subset("test"))["acc"]


def prompt_count_curve(proto: ToyProtocol, seed: int, fractions=(1.0, 0.5, 0.4, 0.1),
                       known: dict[int, float] | None = None) -> dict[float, float]:
    """Test accuracy of VPT trained from scratch with a fraction of the full prompt count.

    Each fraction ``f`` maps to ``max(1, round_half_up(f * per_layer))``
    prompts per layer. ``known`` supplies accuracies already measured for
    some per-layer counts.
    """
    ds = proto.dataset(seed)
    known = dict(known or {})
    out = {}
    for f in fractions:
        m = max(1, C.round_half_up(f * proto.per_layer))
        if m not in known:
            params, ps, _ = proto.trained(seed, m, ds)
            known[m] = heldout_accuracy(params, ps, ds)
        out[f] = known[m]
    return out


def finetune_condensed(proto: ToyProtocol, params: ViTParams, promptset: PromptSet, ds: Dataset,
                       plan: C.CondensationPlan, seed: int, finetune: bool = True) -> tuple[float, PromptSet]:
    """Apply ``plan`` to copies of the trained state and optionally fine-tune."""
    head = params.copy()
    head.freeze_backbone()
    condensed = C.apply_plan(promptset.copy(), plan)
    if finetune:
        train(head, condensed, ds, proto.train_config(seed).for_finetune(proto.finetune_epochs))
    return heldout_accuracy(head, condensed, ds), condensed


def condensation_study(proto: ToyProtocol, seed: int, cases, trained=None) -> dict:
    """Condense one trained model several ways.

    Parameters
    ----------
    cases
        Iterable of ``(k_percent, method, finetune)``.
    trained
        Optional ``(params, promptset, dataset)`` from :meth:`ToyProtocol.trained`.

    Returns
    -------
    dict
        ``full`` accuracy plus one entry per case keyed
        ``"{method}@{k}"`` (suffix ``"/noft"`` without fine-tuning) holding
        accuracy and kept counts per layer.
    """
    params, ps, ds = trained if trained is not None else proto.trained(seed)
    out = {"full": heldout_accuracy(params, ps, ds), "total": ps.total}
    tables: dict[str, C.ScoreTable] = {}
    for k, method, finetune in cases:
        source = C.CLS_SIM if method == C.CLS_SIM else C.GLOBAL
        if source not in tables:
            tables[source] = C.score(params, ps, ds, method)
        plan = C.select(tables[source], k, method)
        acc, condensed = finetune_condensed(proto, params, ps, ds, plan, seed, finetune)
        key = f"{method}@{k:g}" + ("" if finetune else "/noft")
        out[key] = {"acc": acc, "counts": condensed.counts()}
    return out


def taylor_fidelity(proto: ToyProtocol, seed: int, per_layer: int = 8, variant: str = C.INNER) -> dict:
    """Rank agreement between Taylor scores and exact zeroizing deltas on a trained model."""
    params, ps, ds = proto.trained(seed, per_layer)
    table = C.score_taylor(params, ps, ds, variant)
    ids = ps.identities()
    scores = np.array([table.entries[i] for i in ids])
    deltas = np.array([C.leave_one_out_oracle(params, ps, ds, i) for i in ids])
    return {"spearman": float(spearmanr(scores, deltas).statistic), "scores": scores, "deltas": deltas}
