"""Visual prompt tokens (shallow and deep) and the prompt-tuning freeze view."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, PromptLookupError
from .tensor import Tensor
from .vit import HEAD_PARAMS, AttentionTrace, ViTConfig, ViTParams, forward

DEEP = "deep"
SHALLOW = "shallow"

PromptId = tuple[int, int]


@dataclass
class PromptSet:
    """Per-layer prompt matrices with stable ``(layer, slot)`` identities.

    ``ids[l][j]`` names row ``j`` of ``layers[l]``. Slots are assigned at
    initialisation and never renumbered, so identities survive condensation.
    """

    mode: str
    layers: list[Tensor]
    ids: list[list[PromptId]]

    def __post_init__(self):
        if self.mode not in (DEEP, SHALLOW):
            raise ContractError(f"unknown prompt mode {self.mode!r}")
        if self.mode == SHALLOW and len(self.layers) != 1:
            raise ContractError(f"shallow prompt set needs exactly one matrix, got {len(self.layers)}")
        if len(self.ids) != len(self.layers):
            raise ContractError("ids and layers disagree in length")
        for l, (p, ids) in enumerate(zip(self.layers, self.ids)):
            if p.ndim != 2 or p.shape[0] != len(ids):
                raise ContractError(f"layer {l}: prompt matrix {p.shape} vs {len(ids)} identities")

    @property
    def dim(self) -> int:
        return self.layers[0].shape[1]

    def counts(self) -> list[int]:
        return [p.shape[0] for p in self.layers]

    @property
    def total(self) -> int:
        return sum(self.counts())

    def identities(self) -> list[PromptId]:
        return [i for ids in self.ids for i in ids]

    def locate(self, pid: PromptId) -> tuple[int, int]:
        """Return ``(layer, row)`` holding prompt ``pid``."""
        layer, _ = pid
        if 0 <= layer < len(self.ids):
            try:
                return layer, self.ids[layer].index(tuple(pid))
            except ValueError:
                pass
        raise PromptLookupError(f"unknown prompt identity {tuple(pid)}")

    def vector(self, pid: PromptId) -> np.ndarray:
        layer, row = self.locate(pid)
        return self.layers[layer].data[row]

    def forward_tensors(self) -> list[Tensor | None]:
        return [p if p.shape[0] else None for p in self.layers]

    def copy(self) -> "PromptSet":
        return PromptSet(
            self.mode,
            [Tensor(p.data, requires_grad=p.requires_grad) for p in self.layers],
            [list(ids) for ids in self.ids],
        )

    def to_record(self) -> tuple[dict[str, np.ndarray], dict]:
        """Named arrays plus JSON-able metadata for the checkpoint container."""
        arrays = {f"prompts.{l}": p.data for l, p in enumerate(self.layers)}
        meta = {"mode": self.mode, "dim": self.dim, "ids": [[list(i) for i in ids] for ids in self.ids]}
        return arrays, meta

    @classmethod
    def from_record(cls, arrays: dict[str, np.ndarray], meta: dict) -> "PromptSet":
        layers, ids = [], []
        for l, lid in enumerate(meta["ids"]):
            arr = np.asarray(arrays[f"prompts.{l}"]).reshape(len(lid), meta["dim"])
            layers.append(Tensor(arr, requires_grad=True))
            ids.append([tuple(i) for i in lid])
        return cls(meta["mode"], layers, ids)


def init_prompts(config: ViTConfig, mode: str = DEEP, m_per_layer=0, seed: int = 0) -> PromptSet:
    """Xavier-uniform prompts, ``U[-v, v]`` with ``v = sqrt(6 / (d + d))``.

    ``m_per_layer`` is an int (uniform) or, in deep mode, a per-layer list.
    """
    n_layers = config.depth if mode == DEEP else 1
    counts = [m_per_layer] * n_layers if np.isscalar(m_per_layer) else list(m_per_layer)
    if len(counts) != n_layers:
        raise ContractError(f"expected {n_layers} prompt counts, got {len(counts)}")
    if any(int(m) < 0 for m in counts):
        raise ContractError("prompt counts must be non-negative")
    d = config.dim
    v = math.sqrt(6.0 / (d + d))
    rng = np.random.default_rng(seed)
    layers, ids = [], []
    for l, m in enumerate(counts):
        m = int(m)
        layers.append(Tensor(rng.uniform(-v, v, size=(m, d)), requires_grad=True))
        ids.append([(l, j) for j in range(m)])
    return PromptSet(mode, layers, ids)


def _check(params: ViTParams, promptset: PromptSet, mode: str) -> None:
    if promptset.mode != mode:
        raise ContractError(f"expected a {mode} prompt set, got {promptset.mode}")
    if promptset.dim != params.config.dim:
        raise DimensionError(f"prompt width {promptset.dim} != model dim {params.config.dim}")


def prompt_forward(images, params: ViTParams, promptset: PromptSet | None, trace: bool = False,
                   rng=None) -> tuple[Tensor, AttentionTrace | None]:
    """Forward pass dispatching on the prompt set's mode (plain model if None)."""
    if promptset is None:
        return forward(images, params, None, trace=trace, rng=rng)
    if promptset.dim != params.config.dim:
        raise DimensionError(f"prompt width {promptset.dim} != model dim {params.config.dim}")
    return forward(images, params, promptset.forward_tensors(), mode=promptset.mode, trace=trace, rng=rng)


def forward_shallow(images, params: ViTParams, promptset: PromptSet, trace: bool = False, rng=None):
    _check(params, promptset, SHALLOW)
    return prompt_forward(images, params, promptset, trace, rng)


def forward_deep(images, params: ViTParams, promptset: PromptSet, trace: bool = False, rng=None):
    _check(params, promptset, DEEP)
    return prompt_forward(images, params, promptset, trace, rng)


def trainable_params(params: ViTParams, promptset: PromptSet) -> dict[str, Tensor]:
    """Freeze the backbone and return the prompt-tuning parameter view.

    The view holds every prompt matrix (``prompts.<layer>``) and the
    classifier head; all other tensors are flagged frozen.
    """
    params.freeze_backbone()
    view = {}
    for l, p in enumerate(promptset.layers):
        p.requires_grad = True
        view[f"prompts.{l}"] = p
    for name in HEAD_PARAMS:
        view[name] = params[name]
    return view


def count_scalars(view: dict[str, Tensor]) -> int:
    return sum(t.size for t in view.values())
