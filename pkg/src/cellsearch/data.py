"""Datasets: synthetic generators, the PDTS binary format, splits, augmentation.

Images are stored as ``uint8`` arrays shaped ``(N, C, H, W)`` and converted
to normalised floats only when batches are drawn.

PDTS layout (all integers little-endian)::

    b"PDTS"                      4 bytes magic
    version                      u16 (currently 1)
    images classes height width channels   5 x u32
    labels                       images x u8
    pixels                       images x channels x height x width x u8
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .exceptions import ConfigError, FormatError

PDTS_MAGIC = b"PDTS"
PDTS_VERSION = 1
_HEADER = struct.Struct("<4sH5I")

SHAPE_CLASSES = ("square", "disc", "cross", "hbar", "vbar", "triangle", "ring", "diagonal")
SHORTCUT_MAX_CLASSES = 8
GENERATORS = ("shapes", "shortcut")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)

    def floats(self) -> np.ndarray:
        """Pixels scaled to ``[0, 1]``."""
        return self.images.astype(np.float64) / 255.0

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class DatasetSplits:
    train: Dataset
    test: Dataset
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            x = self.train.floats() if len(self.train) else np.zeros((1,) + self.train.image_shape)
            self.mean = x.mean(axis=(0, 2, 3))
            self.std = x.std(axis=(0, 2, 3))
            self.std[self.std < 1e-6] = 1.0

    def normalise(self, images_u8: np.ndarray) -> np.ndarray:
        x = images_u8.astype(np.float64) / 255.0
        return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def image_shape(self):
        return self.train.image_shape


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from and how big it is."""

    source: str = "synthetic"
    generator: str = "shapes"
    classes: int = 4
    image_size: int = 16
    channels: int = 3
    train_count: int = 256
    test_count: int = 128
    seed: int = 0
    split_seed: int = 0
    train_path: Optional[str] = None
    test_path: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "file"):
            raise ConfigError(f"dataset source must be 'synthetic' or 'file', got {self.source!r}")
        if self.source == "synthetic":
            if self.generator not in GENERATORS:
                raise ConfigError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
            if self.classes < 2:
                raise ConfigError("need at least two classes")
            if self.train_count < 0 or self.test_count < 0:
                raise ConfigError("sample counts must be non-negative")
        elif not self.train_path or not self.test_path:
            raise ConfigError("file datasets need train_path and test_path")


# ---------------------------------------------------------------- synthetic

def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def _draw_shape(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary mask of one figure with random scale and position."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = rng.uniform(0.22, 0.34) * size
    cy = rng.uniform(r, size - r)
    cx = rng.uniform(r, size - r)
    dy, dx = yy - cy, xx - cx
    t = max(1.0, size / 10)
    if kind == "square":
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif kind == "disc":
        m = dy ** 2 + dx ** 2 <= r ** 2
    elif kind == "cross":
        m = ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    elif kind == "hbar":
        m = (np.abs(dy) <= t) & (np.abs(dx) <= r * 1.3)
    elif kind == "vbar":
        m = (np.abs(dx) <= t) & (np.abs(dy) <= r * 1.3)
    elif kind == "triangle":
        m = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    elif kind == "ring":
        d2 = dy ** 2 + dx ** 2
        m = (d2 <= r ** 2) & (d2 >= (r - 1.5 * t) ** 2)
    else:
        m = (np.abs(dy - dx) <= t) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    return m


def _shapes(n, classes, size, channels, rng):
    if classes > len(SHAPE_CLASSES):
        raise ConfigError(f"'shapes' supports at most {len(SHAPE_CLASSES)} classes, got {classes}")
    labels = _balanced_labels(n, classes, rng)
    images = np.empty((n, channels, size, size), dtype=np.uint8)
    for k in range(n):
        mask = _draw_shape(SHAPE_CLASSES[labels[k]], size, rng)
        bg = rng.uniform(0.0, 0.35, size=channels)
        fg = rng.uniform(0.6, 1.0, size=channels)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, 0.08, size=img.shape)
        images[k] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return images, labels


def _shortcut(n, classes, size, channels, rng):
    """Class is the global brightness level; a random figure is pure distraction."""
    if classes > SHORTCUT_MAX_CLASSES:
        raise ConfigError(f"'shortcut' supports at most {SHORTCUT_MAX_CLASSES} classes, got {classes}")
    labels = _balanced_labels(n, classes, rng)
    levels = np.linspace(0.2, 0.8, classes)
    images = np.empty((n, channels, size, size), dtype=np.uint8)
    for k in range(n):
        mask = _draw_shape(SHAPE_CLASSES[rng.integers(len(SHAPE_CLASSES))], size, rng)
        base = levels[labels[k]]
        img = np.full((channels, size, size), base) + 0.15 * (mask[None] - mask.mean())
        img = img + rng.normal(0.0, 0.1, size=img.shape)
        images[k] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return images, labels


def generate_synthetic(spec: DatasetSpec, seed: Optional[int] = None) -> DatasetSplits:
    """Deterministic train/test splits for a synthetic spec."""
    if spec.source != "synthetic":
        raise ConfigError("generate_synthetic needs a synthetic spec")
    seed = spec.seed if seed is None else seed
    make = _shapes if spec.generator == "shapes" else _shortcut
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    train = Dataset(*make(spec.train_count, spec.classes, spec.image_size, spec.channels, train_rng),
                    spec.classes)
    test = Dataset(*make(spec.test_count, spec.classes, spec.image_size, spec.channels, test_rng),
                   spec.classes)
    return DatasetSplits(train, test)


def load_splits(spec: DatasetSpec) -> DatasetSplits:
    if spec.source == "synthetic":
        return generate_synthetic(spec)
    train = load_binary_dataset(spec.train_path)
    test = load_binary_dataset(spec.test_path)
    if train.image_shape != test.image_shape or train.num_classes != test.num_classes:
        raise FormatError("train and test files disagree on geometry or class count")
    return DatasetSplits(train, test)


# ---------------------------------------------------------------- PDTS

def encode_binary_dataset(data: Dataset) -> bytes:
    n, c, h, w = data.images.shape if len(data) else (0,) + tuple(data.images.shape[1:])
    if data.num_classes > 256:
        raise FormatError("PDTS stores labels as u8; at most 256 classes")
    header = _HEADER.pack(PDTS_MAGIC, PDTS_VERSION, n, data.num_classes, h, w, c)
    return header + data.labels.astype(np.uint8).tobytes() + np.ascontiguousarray(data.images).tobytes()


def write_binary_dataset(path, data: Dataset) -> None:
    Path(path).write_bytes(encode_binary_dataset(data))


def decode_binary_dataset(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", field="offset 0")
    magic, version, n, classes, h, w, c = _HEADER.unpack_from(buf, 0)
    if magic != PDTS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PDTS_MAGIC!r}", field="offset 0")
    if version != PDTS_VERSION:
        raise FormatError(f"unsupported version {version}", field="offset 4")
    off = _HEADER.size
    need = off + n + n * c * h * w
    if len(buf) < need:
        raise FormatError(f"truncated payload: {len(buf)} bytes, expected {need}",
                          field=f"offset {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", field=f"offset {need}")
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label {labels[i]} >= classes {classes} at image index {i}",
                          field=f"labels[{i}] (offset {off + i})")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * c * h * w, offset=off + n)
    return Dataset(pixels.reshape(n, c, h, w).copy(), labels, classes)


def load_binary_dataset(path) -> Dataset:
    return decode_binary_dataset(Path(path).read_bytes())


# ---------------------------------------------------------------- splitting & batching

def search_split(labels: np.ndarray, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Partition indices into two halves, stratified by class.

    Within every class the two halves differ by at most one sample; the
    odd sample of each class alternates between halves.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    first, second = [], []
    flip = False
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        odd = len(idx) % 2 == 1
        cut = len(idx) // 2 + (1 if odd and not flip else 0)
        if odd:
            flip = not flip
        first.append(idx[:cut])
        second.append(idx[cut:])
    a = np.sort(np.concatenate(first)) if first else np.zeros(0, dtype=np.int64)
    b = np.sort(np.concatenate(second)) if second else np.zeros(0, dtype=np.int64)
    return a, b


def minibatches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def cutout(images: np.ndarray, length: int, rng: np.random.Generator, fill=0.0) -> np.ndarray:
    """Paste a ``length x length`` square of ``fill`` at a uniform random centre.

    The square is clipped at the borders.  ``fill`` may be a scalar or a
    per-channel vector.
    """
    out = np.array(images, dtype=np.float64, copy=True)
    if length <= 0:
        return out
    n, c, h, w = out.shape
    fill = np.broadcast_to(np.asarray(fill, dtype=np.float64), (c,))
    cy = rng.integers(0, h, size=n)
    cx = rng.integers(0, w, size=n)
    for k in range(n):
        y0, y1 = max(cy[k] - length // 2, 0), min(cy[k] + length - length // 2, h)
        x0, x1 = max(cx[k] - length // 2, 0), min(cx[k] + length - length // 2, w)
        out[k, :, y0:y1, x0:x1] = fill[:, None, None]
    return out


def dataset_stats(splits: DatasetSplits) -> Dict[str, list]:
    return {"mean": [float(v) for v in splits.mean], "std": [float(v) for v in splits.std]}
