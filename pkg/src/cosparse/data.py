"""Datasets: deterministic synthetic pattern generators plus IDX/CSV ingestion.

Two synthetic families provide an upstream/downstream pair with a real
domain gap: "shapes" renders filled geometric figures (one figure family per
class) and "textures" renders oriented sinusoidal gratings (one orientation
per class). Both are exactly class-balanced and bit-reproducible from their
spec.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .seeding import child_seed

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    images: np.ndarray  # N x C x h x w float32 in [0, 1]
    labels: np.ndarray  # N int64 in [0, K)
    num_classes: int
    split: str  # "train" | "test"
    sample_ids: Optional[np.ndarray] = None  # provenance indices for split audits

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be N x C x h x w, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError("image/label count mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")
        if not np.isfinite(self.images).all():
            raise DataError("non-finite image values")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str  # "shapes" | "textures"
    num_classes: int
    per_class: int
    size: int
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("shapes", "textures"):
            raise DataError(f"unknown synthetic kind {self.kind!r}")
        if self.num_classes < 2:
            raise DataError("need at least 2 classes")
        if self.per_class < 1 or self.size < 8 or self.noise < 0:
            raise DataError("bad synthetic spec")


def _grid(size: int):
    c = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(c, c, indexing="ij")


def _render_shape(cls: int, size: int, gen: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    cy, cx = gen.uniform(-0.15, 0.15, size=2)
    scale = gen.uniform(0.55, 0.7)
    angle = gen.uniform(-0.25, 0.25)  # keep orientations canonical per class
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    kind = cls % 6
    if kind == 0:  # ellipse
        ecc = gen.uniform(0.55, 0.75)
        inside = (u / scale) ** 2 + (v / (scale * ecc)) ** 2 <= 1.0
    elif kind == 1:  # rectangle frame
        ar = gen.uniform(0.55, 0.7)
        inside = (np.abs(u) <= scale) & (np.abs(v) <= scale * ar)
        inside &= ~((np.abs(u) <= scale * 0.55) & (np.abs(v) <= scale * ar * 0.45))
    elif kind == 2:  # triangle
        top = scale * 0.9
        inside = (v >= -top * 0.7) & (v <= top)
        inside &= np.abs(u) <= (top - v) * 0.65
    elif kind == 3:  # plus
        bar = scale * 0.3
        inside = ((np.abs(u) <= bar) & (np.abs(v) <= scale)) | (
            (np.abs(v) <= bar) & (np.abs(u) <= scale))
    elif kind == 4:  # ring
        rr = np.sqrt(u ** 2 + v ** 2)
        inside = (rr <= scale) & (rr >= scale * 0.5)
    else:  # diamond
        inside = (np.abs(u) + np.abs(v)) <= scale
    fg = gen.uniform(0.75, 1.0)
    return np.where(inside, fg, 0.0).astype(np.float32)


def _render_texture(cls: int, size: int, gen: np.random.Generator, k: int) -> np.ndarray:
    yy, xx = _grid(size)
    angle = np.pi * cls / k + gen.uniform(-0.08, 0.08)
    freq = gen.uniform(2.0, 4.0)
    phase = gen.uniform(0.0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    contrast = gen.uniform(0.35, 0.5)
    return (0.5 + contrast * wave).astype(np.float32)


def synth_generate(spec: SyntheticSpec) -> tuple:
    """Render the dataset and split 80/20 by interleave. Returns (train, test)."""
    n = spec.num_classes * spec.per_class
    images = np.empty((n, 1, spec.size, spec.size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    idx = 0
    for cls in range(spec.num_classes):
        for j in range(spec.per_class):
            gen = np.random.default_rng(child_seed(spec.seed, spec.kind, cls, j))
            if spec.kind == "shapes":
                img = _render_shape(cls, spec.size, gen)
            else:
                img = _render_texture(cls, spec.size, gen, spec.num_classes)
            if spec.noise > 0:
                img = img + gen.normal(0.0, spec.noise, size=img.shape).astype(np.float32)
            images[idx, 0] = np.clip(img, 0.0, 1.0)
            labels[idx] = cls
            idx += 1
    within = np.tile(np.arange(spec.per_class), spec.num_classes)
    test_sel = within % 5 == 4
    ids = np.arange(n)
    name = f"{spec.kind}-k{spec.num_classes}"

    def subset(sel: np.ndarray, split: str) -> Dataset:
        return Dataset(name, images[sel], labels[sel], spec.num_classes, split, ids[sel])

    return subset(~test_sel, "train"), subset(test_sel, "test")


# --------------------------------------------------------------------------
# File ingestion


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"truncated IDX file while reading {what}")
    return data


def load_idx(path_images, path_labels, name: str = "idx", split: str = "train") -> Dataset:
    """IDX image/label pair: big-endian headers, u8 pixels scaled to [0, 1]."""
    with open(path_images, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(f"bad image magic 0x{magic:08x}")
        raw = _read_exact(fh, n * rows * cols, "image data")
        if fh.read(1):
            raise DataError("trailing bytes in IDX image file")
    with open(path_labels, "rb") as fh:
        magic, nl = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise DataError(f"bad label magic 0x{magic:08x}")
        lab = _read_exact(fh, nl, "label data")
        if fh.read(1):
            raise DataError("trailing bytes in IDX label file")
    if n != nl:
        raise DataError(f"image count {n} does not match label count {nl}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    images = (images.astype(np.float32) / 255.0)
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    k = int(labels.max()) + 1 if n else 0
    return Dataset(name, images, labels, k, split)


def load_csv(path, name: str = "csv", split: str = "train") -> Dataset:
    """Header line "h,w,c,K" then one "label,pixel,..." row per sample."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        try:
            h, w, c, k = (int(v) for v in header.split(","))
        except ValueError:
            raise DataError(f"bad CSV header {header!r}, expected h,w,c,K") from None
        rows = []
        labels = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 1 + h * w * c:
                raise DataError(f"line {lineno}: expected {1 + h * w * c} fields, got {len(parts)}")
            labels.append(int(parts[0]))
            rows.append(np.asarray(parts[1:], dtype=np.float32))
    images = np.stack(rows).reshape(len(rows), c, h, w) if rows else \
        np.empty((0, c, h, w), dtype=np.float32)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise DataError("CSV pixel values outside [0, 1]")
    return Dataset(name, images, np.asarray(labels, dtype=np.int64), k, split)


# --------------------------------------------------------------------------
# Batching


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Deterministic shuffled index batches; the final partial batch is kept."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    gen = np.random.default_rng(child_seed(seed, "batches", epoch))
    order = gen.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple]:
    for idx in batch_indices(len(ds), batch_size, seed, epoch):
        yield ds.images[idx], ds.labels[idx]
