"""
Miniature Vision Transformer with optional prompt tokens.

Block order is pre-layernorm::

    x = x + proj(heads(LN1(x)))
    x = x + fc2(dropout(gelu(fc1(LN2(x)))))

Token order inside a layer that receives prompts is ``[P; CLS; patches]``.
Prompts never receive positional embeddings. The classifier reads the
[CLS] token by its index, which moves when shallow prompts are prepended.

Checkpoint container
--------------------
Little-endian throughout::

    offset 0   8 bytes   magic  b"VPTCKPT1"
    offset 8   uint64    header length H in bytes
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          tensor payload, float64 little-endian, row-major

The header is ``{"config": {...}, "tensors": [{"name", "shape", "offset",
"frozen"}, ...], "extra": {...}}`` where ``offset`` counts bytes from the
start of the payload. Tensors are written in the order listed; the header
lists them in sorted name order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParseError
from .tensor import Tensor

CKPT_MAGIC = b"VPTCKPT1"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1 or self.num_classes < 1 or self.channels < 1:
            raise ContractError("depth, num_classes and channels must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def replace(self, **changes) -> "ViTConfig":
        return ViTConfig(**{**asdict(self), **changes})


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, hidden = config.dim, config.dim * config.mlp_ratio
    shapes = {
        "patch.weight": (config.patch_dim, d),
        "patch.bias": (d,),
        "cls": (1, d),
        "pos": (config.num_tokens, d),
        "norm.gain": (d,),
        "norm.bias": (d,),
        "head.weight": (d, config.num_classes),
        "head.bias": (config.num_classes,),
    }
    for i in range(config.depth):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "fc1.weight": (d, hidden), p + "fc1.bias": (hidden,),
            p + "fc2.weight": (hidden, d), p + "fc2.bias": (d,),
        })
    return shapes


HEAD_PARAMS = ("head.weight", "head.bias")


@dataclass
class ViTParams:
    """Named backbone and head tensors plus a per-tensor frozen flag."""

    config: ViTConfig
    tensors: dict[str, Tensor]
    frozen: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ContractError(f"params do not match config: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ContractError(f"param {name}: shape {self.tensors[name].shape} != expected {shape}")
        for name in self.tensors:
            self.frozen.setdefault(name, False)
        self.apply_freeze()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def apply_freeze(self) -> None:
        for name, t in self.tensors.items():
            t.requires_grad = not self.frozen[name]
            if self.frozen[name]:
                t.grad = None

    def freeze_backbone(self) -> None:
        """Freeze everything except the classifier head."""
        for name in self.tensors:
            self.frozen[name] = name not in HEAD_PARAMS
        self.apply_freeze()

    def unfreeze_all(self) -> None:
        for name in self.tensors:
            self.frozen[name] = False
        self.apply_freeze()

    def backbone_names(self) -> list[str]:
        return [n for n in sorted(self.tensors) if n not in HEAD_PARAMS]

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        names = sorted(self.tensors) if names is None else names
        return {n: self.tensors[n].data.copy() for n in names}

    def copy(self) -> "ViTParams":
        return ViTParams(
            self.config,
            {n: Tensor(t.data) for n, t in self.tensors.items()},
            dict(self.frozen),
        )


def init_params(config: ViTConfig, seed: int = 0, zero: bool = False) -> ViTParams:
    """Xavier-uniform matrices, N(0, 0.02) [CLS]/positional terms, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in sorted(param_shapes(config).items()):
        if zero:
            arr = np.zeros(shape)
        elif name.endswith("gain"):
            arr = np.ones(shape)
        elif name.endswith("bias"):
            arr = np.zeros(shape)
        elif name in ("cls", "pos"):
            arr = rng.normal(0.0, 0.02, size=shape)
        else:
            fan_in, fan_out = shape
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-lim, lim, size=shape)
        tensors[name] = Tensor(arr)
    return ViTParams(config, tensors)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``(C, H, W)`` or ``(B, C, H, W)`` images into raster-ordered patches.

    Each patch is flattened channel-major then row-major, giving rows of
    length ``C * p * p``.
    """
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    if single:
        image = image[None]
    if image.ndim != 4:
        raise DimensionError(f"patchify: expected (C,H,W) or (B,C,H,W), got {image.shape}")
    B, C, H, W = image.shape
    p = patch_size
    if H % p or W % p:
        raise DimensionError(f"patchify: image {H}x{W} not divisible by patch size {p}")
    x = image.reshape(B, C, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
    out = np.ascontiguousarray(x.reshape(B, (H // p) * (W // p), C * p * p))
    return out[0] if single else out


def attention(q: Tensor, k: Tensor, v: Tensor, dropout_rate: float = 0.0,
              rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    Scores are divided by the square root of the per-head width (last axis
    of ``q``). Returns ``(A @ V, A)`` where ``A`` is the post-softmax matrix
    before any dropout.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention: incompatible Q {q.shape}, K {k.shape}, V {v.shape}")
    nd = k.ndim
    kt = T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = T.scale(T.matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))
    a = T.softmax_rows(scores)
    return T.matmul(T.dropout(a, dropout_rate, rng), v), a


@dataclass
class AttentionTrace:
    """Post-softmax attention matrices captured during a forward pass.

    ``entries[l]`` is an array of shape ``(B, H, t, t)`` for layer ``l``;
    ``tokens[l]`` is ``t`` and ``prompts[l]`` the number of prompt tokens
    leading that layer's sequence.
    """

    entries: list[np.ndarray] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    prompts: list[int] = field(default_factory=list)
    cls_index: list[int] = field(default_factory=list)

    def record(self, a: np.ndarray, n_prompts: int, cls_index: int) -> None:
        self.entries.append(a.copy())
        self.tokens.append(a.shape[-1])
        self.prompts.append(n_prompts)
        self.cls_index.append(cls_index)

    def matrix(self, layer: int, head: int, sample: int = 0) -> np.ndarray:
        return self.entries[layer][sample, head]


def _heads(x: Tensor, params: ViTParams, layer: int, trace: AttentionTrace | None,
           n_prompts: int, cls_index: int, rng) -> Tensor:
    """Concat of per-head attention outputs projected by W_o (no residual)."""
    cfg = params.config
    p = f"layers.{layer}."
    B, t, d = x.shape
    H, dh = cfg.heads, cfg.head_dim

    def split(w):
        y = T.reshape(T.matmul(x, params[p + w]), (B, t, H, dh))
        return T.transpose(y, (0, 2, 1, 3))

    out, a = attention(split("wq"), split("wk"), split("wv"), cfg.dropout_rate, rng)
    if trace is not None:
        trace.record(a.data, n_prompts, cls_index)
    merged = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, t, d))
    return T.matmul(merged, params[p + "wo"])


def mhsa(x: Tensor, params: ViTParams, layer: int, trace: AttentionTrace | None = None) -> Tensor:
    """``Concat[head_1..head_H] W_o + X`` for ``X`` of shape ``(t, d)`` or ``(B, t, d)``."""
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[-1] != params.config.dim:
        raise DimensionError(f"mhsa: token width {x.shape[-1]} != model dim {params.config.dim}")
    y = T.add(_heads(x, params, layer, trace, 0, 0, None), x)
    return T.reshape(y, y.shape[1:]) if single else y


def _block(x: Tensor, params: ViTParams, layer: int, trace, n_prompts: int, cls_index: int, rng) -> Tensor:
    p = f"layers.{layer}."
    h = T.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
    x = T.add(x, _heads(h, params, layer, trace, n_prompts, cls_index, rng))
    h = T.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
    h = T.gelu(T.add_bias(T.matmul(h, params[p + "fc1.weight"]), params[p + "fc1.bias"]))
    if rng is not None:
        h = T.dropout(h, params.config.dropout_rate, rng)
    h = T.add_bias(T.matmul(h, params[p + "fc2.weight"]), params[p + "fc2.bias"])
    return T.add(x, h)


def embed(images: np.ndarray, params: ViTParams) -> Tensor:
    """Patch + [CLS] embedding with positional terms: ``(B, n, d)``."""
    cfg = params.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"image batch {images.shape} does not match config "
            f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})"
        )
    B = images.shape[0]
    patches = Tensor(patchify(images, cfg.patch_size))
    x = T.add_bias(T.matmul(patches, params["patch.weight"]), params["patch.bias"])
    cls = T.expand_batch(params["cls"], B)
    x = T.concat([cls, x], axis=1)
    return T.add_bias(x, params["pos"])


def _batched_prompt(p: Tensor, batch: int) -> Tensor:
    if p.ndim == 2:
        return T.expand_batch(p, batch)
    if p.ndim == 3 and p.shape[0] == batch:
        return p
    raise DimensionError(f"prompt tensor {p.shape} incompatible with batch {batch}")


def forward(
    images: np.ndarray,
    params: ViTParams,
    prompts: list[Tensor] | None = None,
    mode: str = "deep",
    trace: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, AttentionTrace | None]:
    """Classify a batch ``(B, C, H, W)`` or a single image ``(C, H, W)``.

    Parameters
    ----------
    prompts
        Deep mode: one tensor per layer (``(m_l, d)``, or ``(B, m_l, d)`` for
        per-sample prompt copies); a ``None`` entry or ``m_l == 0`` skips
        concatenation. Shallow mode: a single-element list.
    mode
        ``"deep"`` or ``"shallow"``.
    rng
        Dropout stream. ``None`` disables dropout (evaluation, scoring,
        and condensation fine-tuning).

    Returns
    -------
    logits, trace
        ``(B, num_classes)`` logits (``(num_classes,)`` for a single image)
        and the attention trace when requested.
    """
    cfg = params.config
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if mode not in ("deep", "shallow"):
        raise ContractError(f"unknown prompt mode {mode!r}")
    prompts = list(prompts) if prompts else []
    if mode == "deep" and prompts and len(prompts) != cfg.depth:
        raise ContractError(f"deep mode needs {cfg.depth} prompt tensors, got {len(prompts)}")
    if mode == "shallow" and len(prompts) > 1:
        raise ContractError(f"shallow mode takes one prompt tensor, got {len(prompts)}")
    for p in prompts:
        if p is not None and p.shape[-1] != cfg.dim:
            raise DimensionError(f"prompt width {p.shape[-1]} != model dim {cfg.dim}")

    tr = AttentionTrace() if trace else None
    x = embed(images, params)
    B = x.shape[0]
    cls_index = 0
    for layer in range(cfg.depth):
        if mode == "deep":
            p = prompts[layer] if prompts else None
            m = 0 if p is None else p.shape[-2]
            if m:
                x = T.concat([_batched_prompt(p, B), x], axis=1)
            x = _block(x, params, layer, tr, m, m, rng)
            if m:
                x = T.slice_axis(x, m, x.shape[1], axis=1)
        else:
            if layer == 0 and prompts and prompts[0] is not None and prompts[0].shape[-2]:
                cls_index = prompts[0].shape[-2]
                x = T.concat([_batched_prompt(prompts[0], B), x], axis=1)
            x = _block(x, params, layer, tr, cls_index, cls_index, rng)
    x = T.layer_norm(x, params["norm.gain"], params["norm.bias"])
    cls = T.reshape(T.slice_axis(x, cls_index, cls_index + 1, axis=1), (B, cfg.dim))
    logits = T.add_bias(T.matmul(cls, params["head.weight"]), params["head.bias"])
    if single:
        logits = T.reshape(logits, (cfg.num_classes,))
    return logits, tr


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ViTParams, extra_tensors: dict[str, np.ndarray] | None = None,
                    extra: dict | None = None) -> None:
    """Write config and named tensors to the container described above.

    ``extra_tensors`` (e.g. prompt matrices) are stored alongside the model
    tensors under their given names and flagged ``frozen = false``.
    """
    arrays = {n: (t.data, params.frozen[n]) for n, t in params.tensors.items()}
    for n, a in (extra_tensors or {}).items():
        if n in arrays:
            raise ContractError(f"extra tensor name {n!r} collides with a model tensor")
        arrays[n] = (np.asarray(a, dtype=np.float64), False)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        data, frozen = arrays[name]
        blob = np.ascontiguousarray(data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "frozen": bool(frozen)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"config": asdict(params.config), "tensors": entries, "extra": extra or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ViTParams, dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(params, extra_tensors, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    if len(raw) < 16:
        raise ParseError("truncated checkpoint header", len(raw))
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise ParseError("truncated checkpoint header", len(raw))
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"invalid checkpoint header: {exc}", 16) from exc
    base = 16 + hlen
    config = ViTConfig(**header["config"])
    model_names = set(param_shapes(config))
    tensors, frozen, extra_tensors = {}, {}, {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + e["offset"]
        stop = start + 8 * count
        if stop > len(raw):
            raise ParseError(f"truncated payload for tensor {e['name']}", len(raw))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).astype(np.float64).reshape(shape)
        if e["name"] in model_names:
            tensors[e["name"]] = Tensor(arr)
            frozen[e["name"]] = bool(e["frozen"])
        else:
            extra_tensors[e["name"]] = arr
    return ViTParams(config, tensors, frozen), extra_tensors, header.get("extra", {})
