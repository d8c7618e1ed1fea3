"""
Synthetic image-classification tasks and dataset file formats.

Binary format (all integers little-endian)::

    offset  size            field
    0       8               magic b"VPTDATA1"
    8       4  uint32       channels C
    12      4  uint32       height H
    16      4  uint32       width W
    20      4  uint32       sample count N
    24      4  uint32       class count K
    28      4*N uint32      labels, each in [0, K)
    28+4N   N  uint8        split tags (0 train, 1 val, 2 test)
    28+5N   8*N*C*H*W f64   pixels, sample-major, then C, H, W

CSV fallback: one sample per row, ``label`` followed by ``H*W*C`` pixel
values in [0, 1] in height, width, channel order. CSV files carry no split
tags; every row is assigned to the split named by the caller.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import rng_for
from .errors import ContractError, ParseError

DATA_MAGIC = b"VPTDATA1"
SPLITS = ("train", "val", "test")
_HEADER = struct.Struct("<8s5I")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.uint8)
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise ContractError("labels/split length does not match image count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if n and self.split.max() > 2:
            raise ContractError("split tags must be 0, 1 or 2")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == SPLITS.index(name)
        return self.images[mask], self.labels[mask]

    def sizes(self) -> dict[str, int]:
        return {s: int((self.split == i).sum()) for i, s in enumerate(SPLITS)}

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<5I", *self.image_shape, len(self), self.num_classes))
        h.update(self.labels.astype("<u4").tobytes())
        h.update(self.split.tobytes())
        h.update(self.images.astype("<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a procedural grating task.

    Every class is one oriented sinusoidal grating. ``family`` selects the
    vocabulary: ``"source"`` draws coloured gratings from a coarse grid of
    8 orientations and 4 frequencies (used for optional backbone
    pretraining); ``"target"`` draws grey gratings from a finer grid of 16
    orientations and 8 frequencies, so neighbouring classes differ by small
    angle or frequency steps.
    ``noise`` scales every within-class nuisance (phase, contrast, pixel
    noise); at ``noise == 0`` all samples of a class are identical.
    """

    num_classes: int = 8
    train_per_class: int = 100
    val_per_class: int = 25
    test_per_class: int = 50
    image_size: int = 32
    channels: int = 3
    noise: float = 1.0
    seed: int = 0
    family: str = "target"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("need at least two classes")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 0:
            raise ContractError("per-class split sizes must be non-negative")
        if self.family not in ("source", "target"):
            raise ContractError(f"unknown family {self.family!r}")
        if self.noise < 0:
            raise ContractError("noise must be non-negative")


_SOURCE_ORIENTATIONS = np.arange(8) * (math.pi / 8)
_SOURCE_FREQUENCIES = np.array([1.5, 2.5, 3.5, 4.5])
_TARGET_ORIENTATIONS = np.arange(16) * (math.pi / 16)
_TARGET_FREQUENCIES = np.linspace(1.5, 5.0, 8)
_TARGET_COLOUR = 0.7


def _class_table(spec: SyntheticSpec) -> list[dict]:
    rng = rng_for(spec.seed, f"classes/{spec.family}")
    if spec.family == "source":
        orients, freqs = _SOURCE_ORIENTATIONS, _SOURCE_FREQUENCIES
    else:
        orients, freqs = _TARGET_ORIENTATIONS, _TARGET_FREQUENCIES
    combos = [(o, f) for o in orients for f in freqs]
    if spec.num_classes > len(combos):
        raise ContractError(f"{spec.family} family supports at most {len(combos)} classes")
    picks = rng.choice(len(combos), size=spec.num_classes, replace=False)
    table = []
    for i in picks:
        if spec.family == "source":
            colour = rng.uniform(0.4, 1.0, size=spec.channels)
        else:
            colour = np.full(spec.channels, _TARGET_COLOUR)
        theta, freq = combos[i]
        table.append({"theta": float(theta), "freq": float(freq), "colour": colour,
                      "phase": float(rng.uniform(-math.pi, math.pi))})
    return table


def _render(spec: SyntheticSpec, cls: dict, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s) / s, np.arange(s) / s, indexing="ij")
    jitter = min(spec.noise, 1.0)
    phase = cls["phase"] + jitter * rng.uniform(-math.pi, math.pi)
    contrast = 1.0 + 0.3 * spec.noise * rng.uniform(-1.0, 1.0)
    theta, freq = cls["theta"], cls["freq"]
    wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    img = 0.5 + 0.25 * contrast * cls["colour"][:, None, None] * wave[None]
    if spec.noise:
        img = img + 0.1 * spec.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Render a deterministic dataset; sample order is class-major within each split."""
    table = _class_table(spec)
    rng = rng_for(spec.seed, f"samples/{spec.family}")
    images, labels, split = [], [], []
    for tag, per in enumerate((spec.train_per_class, spec.val_per_class, spec.test_per_class)):
        for c, cls in enumerate(table):
            for _ in range(per):
                images.append(_render(spec, cls, rng))
                labels.append(c)
                split.append(tag)
    shape = (0, spec.channels, spec.image_size, spec.image_size)
    return Dataset(
        np.stack(images) if images else np.zeros(shape),
        np.array(labels, dtype=np.int64),
        np.array(split, dtype=np.uint8),
        spec.num_classes,
        {"generator": "synthetic", **{k: getattr(spec, k) for k in spec.__dataclass_fields__}},
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        _save_csv(ds, path)
        return
    c, h, w = ds.image_shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, c, h, w, len(ds), ds.num_classes))
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(ds.split.astype("u1").tobytes())
        fh.write(ds.images.astype("<f8").tobytes())


def _save_csv(ds: Dataset, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for img, label in zip(ds.images, ds.labels):
            writer.writerow([int(label)] + [repr(float(v)) for v in img.transpose(1, 2, 0).reshape(-1)])


def load_dataset(path, fmt: str = "auto", *, channels: int | None = None, image_size: int | None = None,
                 num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read a dataset written in the binary or CSV format.

    The CSV reader needs ``channels``, ``image_size`` and ``num_classes``;
    all rows are tagged with ``split``. Any malformed input raises
    :class:`ParseError` and no partial dataset is returned.
    """
    path = Path(path)
    if fmt == "auto":
        fmt = "csv" if path.suffix.lower() == ".csv" else "bin"
    raw = path.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if fmt == "bin":
        ds = _parse_bin(raw)
    elif fmt == "csv":
        if channels is None or image_size is None or num_classes is None:
            raise ContractError("CSV loading needs channels, image_size and num_classes")
        ds = _parse_csv(raw.decode("utf-8"), channels, image_size, num_classes, SPLITS.index(split))
    else:
        raise ContractError(f"unknown dataset format {fmt!r}")
    ds.provenance = {"source_file": str(path), "sha256": digest, "format": fmt}
    return ds


def _parse_bin(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size:
        raise ParseError("truncated header", len(raw))
    magic, c, h, w, n, k = _HEADER.unpack_from(raw, 0)
    if magic != DATA_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if min(c, h, w) == 0:
        raise ParseError(f"invalid image shape {(c, h, w)}", 8)
    if k == 0:
        raise ParseError("class count must be positive", 24)
    off = _HEADER.size
    need = off + 4 * n + n + 8 * n * c * h * w
    if len(raw) < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(raw)}", len(raw))
    if len(raw) > need:
        raise ParseError(f"{len(raw) - need} trailing bytes", need)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise ParseError(f"label {labels[bad[0]]} out of range [0, {k})", off + 4 * int(bad[0]))
    split = np.frombuffer(raw, dtype="u1", count=n, offset=off + 4 * n).copy()
    bad = np.flatnonzero(split > 2)
    if bad.size:
        raise ParseError(f"split tag {split[bad[0]]} not in {{0,1,2}}", off + 4 * n + int(bad[0]))
    pix_off = off + 5 * n
    images = np.frombuffer(raw, dtype="<f8", count=n * c * h * w, offset=pix_off).astype(np.float64)
    if not np.all(np.isfinite(images)):
        first = int(np.flatnonzero(~np.isfinite(images))[0])
        raise ParseError("non-finite pixel value", pix_off + 8 * first)
    return Dataset(images.reshape(n, c, h, w), labels, split, k)


def _parse_csv(text: str, channels: int, size: int, num_classes: int, tag: int) -> Dataset:
    width = 1 + size * size * channels
    images, labels = [], []
    for row_no, row in enumerate(csv.reader(text.splitlines()), start=1):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"row {row_no}: expected {width} fields, got {len(row)}", row_no)
        try:
            label = int(row[0])
            values = np.array([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ParseError(f"row {row_no}: {exc}", row_no) from exc
        if not 0 <= label < num_classes:
            raise ParseError(f"row {row_no}: label {label} out of range [0, {num_classes})", row_no)
        if not np.all((values >= 0.0) & (values <= 1.0)):
            raise ParseError(f"row {row_no}: pixel values must lie in [0, 1]", row_no)
        images.append(values.reshape(size, size, channels).transpose(2, 0, 1))
        labels.append(label)
    n = len(labels)
    imgs = np.stack(images) if images else np.zeros((0, channels, size, size))
    return Dataset(imgs, np.array(labels, dtype=np.int64), np.full(n, tag, dtype=np.uint8), num_classes)
