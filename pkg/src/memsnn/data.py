"""Dataset containers, IDX / EVT0 file formats and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (BadLabel, BadMagic, DataError, MissingLabel, ShapeMismatch, TruncatedFile,
                     UnsupportedDtype)

IDX_UBYTE = 0x08
EVT_MAGIC = b"EVT0"
EVENT_SHAPE = (2, 32, 32)
EVENT_CLASSES = 11
MANIFEST = "labels.csv"


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode an IDX container (big-endian header, row-major payload)."""
    if len(buf) < 4:
        raise TruncatedFile(f"{name}: header shorter than 4 bytes")
    if buf[0] != 0 or buf[1] != 0:
        raise BadMagic(f"{name}: IDX magic must start with two zero bytes")
    dtype, rank = buf[2], buf[3]
    if dtype != IDX_UBYTE:
        raise UnsupportedDtype(f"{name}: IDX dtype 0x{dtype:02x} (only unsigned byte is supported)")
    header = 4 + 4 * rank
    if len(buf) < header:
        raise TruncatedFile(f"{name}: dimension block truncated")
    dims = struct.unpack(f">{rank}I", buf[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) < header + count:
        raise TruncatedFile(f"{name}: expected {count} payload bytes, found {len(buf) - header}")
    if len(buf) > header + count:
        raise DataError(f"{name}: {len(buf) - header - count} trailing bytes after payload")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(path: str | Path) -> np.ndarray:
    """Raw IDX tensor (uint8); ``.gz`` files are decompressed transparently."""
    return parse_idx(_read_bytes(path), str(path))


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise UnsupportedDtype("only uint8 arrays can be written as IDX")
    buf = bytes([0, 0, IDX_UBYTE, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    buf += np.ascontiguousarray(array).tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(buf, mtime=0) if path.suffix == ".gz" else buf)


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 28, 28) in [0, 1]
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ShapeMismatch(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("image intensities must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def inputs(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)

    def subset(self, index) -> ImageDataset:
        return ImageDataset(self.images[index], self.labels[index])


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"{directory}: neither {stem} nor {stem}.gz found")


def load_image_dataset(images_path: str | Path, labels_path: str | Path) -> ImageDataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise ShapeMismatch(f"expected rank-3 images and rank-1 labels, got {images.shape}, {labels.shape}")
    return ImageDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def load_mnist(directory: str | Path, split: str = "train") -> ImageDataset:
    """MNIST / FashionMNIST from the standard IDX file names in ``directory``."""
    directory = Path(directory)
    img, lab = IDX_FILES[split]
    return load_image_dataset(_find(directory, img), _find(directory, lab))


def write_events(path: str | Path, counts: np.ndarray) -> None:
    """EVT0: magic, little-endian u32 T, C, H, W, then counts as bytes (clipped at 255)."""
    counts = np.asarray(counts)
    if counts.ndim != 4:
        raise ShapeMismatch(f"event tensor must be (T, C, H, W), got {counts.shape}")
    payload = np.clip(counts, 0, 255).astype(np.uint8)
    Path(path).write_bytes(EVT_MAGIC + struct.pack("<4I", *payload.shape) + payload.tobytes())


def read_events(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != EVT_MAGIC:
        raise BadMagic(f"{path}: missing EVT0 magic")
    if len(buf) < 20:
        raise TruncatedFile(f"{path}: header truncated")
    shape = struct.unpack("<4I", buf[4:20])
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != 20 + count:
        raise TruncatedFile(f"{path}: expected {count} payload bytes, found {len(buf) - 20}")
    return np.frombuffer(buf, dtype=np.uint8, offset=20).reshape(shape)


@dataclass
class EventDataset:
    samples: np.ndarray  # (N, T, 2, 32, 32) uint8 event counts
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def steps(self) -> int:
        return self.samples.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        """Per-step flattened features, ``(N, T, 2048)``."""
        n, t = self.samples.shape[:2]
        return self.samples.reshape(n, t, -1).astype(np.float64)

    def subset(self, index) -> EventDataset:
        return EventDataset(self.samples[index], self.labels[index])


def load_events(directory: str | Path, steps: int | None = None, n_classes: int = EVENT_CLASSES) -> EventDataset:
    """Samples listed in ``labels.csv`` ("filename,label"), in manifest order."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise MissingLabel(f"{directory}: no {MANIFEST}")
    samples, labels = [], []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        name, _, label = line.partition(",")
        if not label.strip():
            raise MissingLabel(f"{manifest}:{lineno}: no label for {name!r}")
        try:
            value = int(label)
        except ValueError as exc:
            raise BadLabel(f"{manifest}:{lineno}: label {label!r} is not an integer") from exc
        if not 0 <= value < n_classes:
            raise BadLabel(f"{manifest}:{lineno}: label {value} outside 0..{n_classes - 1}")
        counts = read_events(directory / name.strip())
        if counts.shape[1:] != EVENT_SHAPE or (steps is not None and counts.shape[0] != steps):
            want = ((steps or "T"),) + EVENT_SHAPE
            raise ShapeMismatch(f"{name}: shape {counts.shape}, expected {want}")
        if samples and counts.shape != samples[0].shape:
            raise ShapeMismatch(f"{name}: shape {counts.shape} differs from {samples[0].shape}")
        samples.append(counts)
        labels.append(value)
    if not samples:
        raise DataError(f"{manifest}: no samples listed")
    return EventDataset(np.stack(samples), np.array(labels, dtype=np.int64))


def write_event_dataset(directory: str | Path, samples: Sequence[np.ndarray], labels: Sequence[int]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, (counts, label) in enumerate(zip(samples, labels, strict=True)):
        name = f"sample{k:05d}.evt"
        write_events(directory / name, counts)
        lines.append(f"{name},{int(label)}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def make_batches(dataset, batch_size: int, seed: int = 0, shuffle: bool = True) -> list[Batch]:
    """Split ``dataset`` (a dataset object or an ``(inputs, labels)`` pair).

    The permutation depends only on ``seed``; the last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    inputs, labels = dataset if isinstance(dataset, tuple) else (dataset.inputs, dataset.labels)
    n = len(labels)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [Batch(inputs[idx], labels[idx], idx)
            for idx in (order[i:i + batch_size] for i in range(0, n, batch_size))]


def make_toy_dataset(n: int = 40, side: int = 8, seed: int = 0) -> ImageDataset:
    """Two linearly separable classes: bright left half (0) vs bright right half (1)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.uniform(0.0, 0.2, size=(n, side, side))
    half = side // 2
    for k, label in enumerate(labels):
        cols = slice(0, half) if label == 0 else slice(half, side)
        images[k, :, cols] = rng.uniform(0.6, 1.0, size=(side, side - half if label else half))
    return ImageDataset(images, labels)
