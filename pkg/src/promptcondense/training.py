"""SGD training loops for prompt tuning and backbone pretraining."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .config import derive_seed, rng_for
from .data import Dataset
from .errors import ConfigError, NumericError
from .prompts import PromptSet, prompt_forward, trainable_params
from .tensor import Tensor
from .vit import HEAD_PARAMS, ViTConfig, ViTParams, init_params

VPT_TRAIN = "vpt-train"
PC_FINETUNE = "pc-finetune"
FINETUNE_LR_SCALE = 0.1


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and schedule settings for one training stage.

    ``lr`` is the base VPT learning rate. In the ``pc-finetune`` stage the
    effective rate is always ``0.1 * lr`` and dropout is always off.
    """

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    dropout: bool = True
    schedule: str = "cosine"
    stage: str = VPT_TRAIN

    def __post_init__(self):
        if self.stage not in (VPT_TRAIN, PC_FINETUNE):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")

    @property
    def effective_lr(self) -> float:
        return self.lr * (FINETUNE_LR_SCALE if self.stage == PC_FINETUNE else 1.0)

    @property
    def use_dropout(self) -> bool:
        return self.dropout and self.stage != PC_FINETUNE

    def for_finetune(self, epochs: int) -> "TrainConfig":
        return replace(self, stage=PC_FINETUNE, epochs=epochs, dropout=False)


@dataclass
class MetricsLog:
    """Append-only training record.

    Wall-clock stage times are kept apart from the deterministic content:
    :meth:`to_json` omits them unless asked.
    """

    epochs: list[dict] = field(default_factory=list)
    stage_times: dict[str, float] = field(default_factory=dict)
    layer_counts: dict[str, list[int]] = field(default_factory=dict)
    results: dict[str, float] = field(default_factory=dict)

    def append(self, record: dict) -> None:
        self.epochs.append(dict(record))

    def extend(self, other: "MetricsLog") -> None:
        self.epochs.extend(other.epochs)
        self.stage_times.update(other.stage_times)
        self.layer_counts.update(other.layer_counts)
        self.results.update(other.results)

    def stage(self, name: str) -> list[dict]:
        return [e for e in self.epochs if e["stage"] == name]

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {"epochs": self.epochs, "layer_counts": self.layer_counts, "results": self.results}
        if include_timing:
            out["stage_times"] = self.stage_times
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(_plain(self.to_dict(include_timing)), sort_keys=True, indent=2) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_logits(params: ViTParams, promptset: PromptSet | None, images: np.ndarray,
                   batch_size: int = 128) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = prompt_forward(images[i:i + batch_size], params, promptset)
            out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, params.config.num_classes))


def evaluate(params: ViTParams, promptset: PromptSet | None, images: np.ndarray, labels: np.ndarray) -> dict:
    """Accuracy (percent) and mean cross-entropy with dropout off."""
    if len(labels) == 0:
        return {"acc": float("nan"), "loss": float("nan")}
    logits = predict_logits(params, promptset, images)
    loss = T.cross_entropy(Tensor(logits), labels).item()
    acc = 100.0 * float(np.mean(logits.argmax(axis=1) == labels))
    return {"acc": acc, "loss": loss}


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    base = cfg.effective_lr
    if cfg.schedule == "constant" or total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(t.data) for n, t in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            if lr:
                t.data = t.data - lr * v


class Adam:
    """Adam with decoupled weight decay; used only for backbone pretraining."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim > 1:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def _loop(trainables: dict[str, Tensor], loss_fn, images, labels, cfg: TrainConfig, log: MetricsLog,
          val_fn=None, optimizer: str = "sgd") -> MetricsLog:
    n = len(labels)
    if cfg.epochs == 0 or n == 0:
        return log
    shuffle = rng_for(cfg.seed, f"{cfg.stage}/shuffle")
    drop = rng_for(cfg.seed, f"{cfg.stage}/dropout") if cfg.use_dropout else None
    if optimizer == "adam":
        opt = Adam(trainables, cfg.weight_decay)
    else:
        opt = SGD(trainables, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        loss_sum, correct = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            opt.zero_grad()
            logits = loss_fn(images[idx], drop)
            loss = T.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            T.backward(loss)
            opt.step(_lr_at(cfg, step, total))
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        record = {"stage": cfg.stage, "epoch": epoch, "train_loss": loss_sum / n, "train_acc": 100.0 * correct / n}
        if val_fn is not None:
            record["val_acc"] = val_fn()
        log.append(record)
    return log


def train(params: ViTParams, promptset: PromptSet, dataset: Dataset, cfg: TrainConfig,
          log: MetricsLog | None = None) -> MetricsLog:
    """Prompt-tune ``promptset`` and the classifier head on the training split.

    Only the prompt matrices and head are updated; every other tensor is
    frozen and left bit-identical.
    """
    log = log if log is not None else MetricsLog()
    view = trainable_params(params, promptset)
    images, labels = dataset.subset("train")
    val_images, val_labels = dataset.subset("val")

    def loss_fn(x, drop):
        logits, _ = prompt_forward(x, params, promptset, rng=drop)
        return logits

    def val_fn():
        return evaluate(params, promptset, val_images, val_labels)["acc"] if len(val_labels) else None

    t0 = time.perf_counter()
    _loop(view, loss_fn, images, labels, cfg, log, val_fn)
    log.stage_times[cfg.stage] = log.stage_times.get(cfg.stage, 0.0) + time.perf_counter() - t0
    return log


def attach_head(backbone: ViTParams, num_classes: int) -> ViTParams:
    """Copy of ``backbone`` with a fresh zero-initialised classifier for ``num_classes``.

    The copy's backbone tensors are frozen.
    """
    cfg = backbone.config.replace(num_classes=num_classes)
    tensors = {n: Tensor(t.data) for n, t in backbone.tensors.items() if n not in HEAD_PARAMS}
    tensors["head.weight"] = Tensor(np.zeros((cfg.dim, num_classes)))
    tensors["head.bias"] = Tensor(np.zeros(num_classes))
    params = ViTParams(cfg, tensors)
    params.freeze_backbone()
    return params


def pretrain_backbone(config: ViTConfig, dataset: Dataset, cfg: TrainConfig,
                      log: MetricsLog | None = None) -> tuple[ViTParams, MetricsLog]:
    """Train every tensor of a fresh model on a source task with Adam.

    ``cfg.lr`` is the Adam step size and ``cfg.weight_decay`` the decoupled
    decay applied to matrices.
    """
    log = log if log is not None else MetricsLog()
    params = init_params(config.replace(num_classes=dataset.num_classes), derive_seed(cfg.seed, "init"))
    params.unfreeze_all()
    images, labels = dataset.subset("train")
    val_images, val_labels = dataset.subset("val")

    def loss_fn(x, drop):
        logits, _ = prompt_forward(x, params, None, rng=drop)
        return logits

    def val_fn():
        return evaluate(params, None, val_images, val_labels)["acc"] if len(val_labels) else None

    _loop(dict(params.tensors), loss_fn, images, labels, replace(cfg, stage=VPT_TRAIN), log, val_fn,
          optimizer="adam")
    return params, log


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
