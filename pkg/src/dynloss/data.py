"""Datasets, IDX files, and the per-epoch train/validation redivision."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, dim) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index], self.n_classes, self.provenance)


# -- IDX ----------------------------------------------------------------------


def _open(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, magic: int) -> np.ndarray:
    raw = _open(path)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    n = int(np.prod(dims))
    if len(body) != n:
        raise IdxFormatError(f"{path}: expected {n} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write unsigned-byte data as IDX; gzip-compressed when ``path`` ends in ``.gz``."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxFormatError("IDX writer only handles unsigned bytes")
    magic = 0x00000800 | array.ndim
    raw = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        raw = gzip.compress(raw, mtime=0)
    path.write_bytes(raw)


def load_mnist_idx(images_path, labels_path, classes: Sequence[int] | None = None) -> Dataset:
    """Load an IDX image/label pair, scale pixels to [0, 1], optionally keep some digits.

    With ``classes`` given, labels are renumbered to ``0..len(classes)-1`` in
    sorted order (a no-op for ``{0, 1}``).
    """
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    n_classes = 10
    if classes is not None:
        keep = sorted(int(c) for c in classes)
        mask = np.isin(y, keep)
        x, y = x[mask], y[mask]
        y = np.searchsorted(np.array(keep), y)
        n_classes = len(keep)
    return Dataset(x, y, n_classes, "mnist")


def load_mnist_dir(root, split: str = "train", classes: Sequence[int] | None = None) -> Dataset:
    """Load ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`` from a directory."""
    root = Path(root)
    prefix = {"train": "train", "test": "t10k"}[split]

    def find(stem):
        for suffix in ("", ".gz"):
            p = root / f"{prefix}-{stem}-ubyte{suffix}"
            if p.exists():
                return p
        raise FileNotFoundError(f"no {prefix}-{stem}-ubyte[.gz] in {root}")

    return load_mnist_idx(find("images-idx3"), find("labels-idx1"), classes)


# -- synthetic ----------------------------------------------------------------


def make_synthetic(kind: str, n: int, noise: float = 0.1, seed: int = 0, n_classes: int = 2) -> Dataset:
    """Seeded 2-D toy data, features min-max scaled to [0, 1].

    ``moons`` is the two interleaved half circles; ``blobs`` places one
    Gaussian blob per class on a circle of radius 3.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    if kind == "moons":
        if n_classes != 2:
            raise ValueError("moons has exactly two classes")
        n0 = (n + 1) // 2
        n1 = n - n0
        t0 = np.linspace(0, np.pi, n0)
        t1 = np.linspace(0, np.pi, n1)
        x = np.concatenate([
            np.stack([np.cos(t0), np.sin(t0)], axis=1),
            np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1),
        ])
        y = np.concatenate([np.zeros(n0, int), np.ones(n1, int)])
        x = x + rng.normal(0.0, noise, size=x.shape)
    elif kind == "blobs":
        if n_classes < 2:
            raise ValueError("blobs needs at least two classes")
        y = np.arange(n) % n_classes
        angle = 2 * np.pi * y / n_classes
        centers = 3.0 * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        x = centers + rng.normal(0.0, noise, size=(n, 2))
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return Dataset((x - lo) / span, y, n_classes, f"synthetic-{kind}")


def write_csv(path, dataset: Dataset) -> None:
    if dataset.input_dim != 2:
        raise ValueError("CSV dump is defined for 2-D datasets")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x0", "x1", "label"])
        for (a, b), y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(a)), repr(float(b)), int(y)])


# -- split protocol -----------------------------------------------------------


@dataclass
class SplitState:
    seed: int
    val_ratio: float = 0.5
    epoch: int = 0
    permutation: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.val_ratio < 1.0:
            raise ValueError("val_ratio must lie strictly between 0 and 1")


def redivide(n: int, state: SplitState) -> tuple[np.ndarray, np.ndarray, SplitState]:
    """Fresh seeded train/validation partition of ``range(n)`` for ``state.epoch``.

    Returns the train indices, the validation indices and the state for
    the next epoch.
    """
    if not 0.0 < state.val_ratio < 1.0:
        raise ValueError("val_ratio must lie strictly between 0 and 1")
    rng = np.random.default_rng([state.seed, state.epoch])
    perm = rng.permutation(n)
    n_val = min(max(int(round(state.val_ratio * n)), 1), n - 1)
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    nxt = SplitState(state.seed, state.val_ratio, state.epoch + 1, perm)
    return train, val, nxt


class BatchStream:
    """Round-robin batches over a seeded shuffle, reshuffled after each pass.

    Within one pass no index repeats, i.e. draws are without replacement.
    """

    def __init__(self, index: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(index) == 0:
            raise ValueError("empty index set")
        self.index = np.asarray(index, dtype=np.int64)
        self.batch_size = min(batch_size, len(self.index))
        self.rng = rng
        self._order = self.rng.permutation(self.index)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.index)
            self._pos = 0
        out = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out

    def take(self, k: int) -> list[np.ndarray]:
        return [self.next() for _ in range(k)]

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            yield self.next()
