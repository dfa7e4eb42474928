"""Datasets: seeded Gaussian blobs and IDX image files."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, UndefinedMetricError
from .models import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ConfigError(f"x {self.x.shape} and y {self.y.shape} do not pair up")
        if self.y.size == 0:
            raise ConfigError("dataset is empty")
        if np.any(self.y < 0):
            raise ConfigError("labels must be non-negative")
        if not np.all(np.isfinite(self.x)):
            raise ConfigError("dataset features contain NaN/Inf")

    def __len__(self) -> int:
        return int(self.y.size)

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1

    @property
    def value_range(self) -> tuple[float, float]:
        return float(self.x.min()), float(self.x.max())

    def normalized(self) -> "Dataset":
        """Standardize with the stored (training-set) statistics."""
        if self.mean is None or self.std is None:
            raise ConfigError("dataset carries no normalization statistics")
        return replace(self, x=(self.x - self.mean) / self.std)

    def subset(self, index) -> "Dataset":
        return replace(self, x=self.x[index], y=self.y[index])


def with_train_stats(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Attach the training mean/std to ``train`` and every other split."""
    mean = train.x.mean(axis=0)
    std = train.x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return [replace(d, mean=mean, std=std) for d in (train, *others)]


@dataclass(frozen=True)
class BlobSpec:
    num_classes: int = 5
    dim: int = 2
    sigma: float = 0.5
    radius: float = 3.0
    n_train: int = 400
    n_test: int = 200
    seed: int = 0
    means: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.num_classes < 2 or self.dim < 1:
            raise ConfigError(f"blob spec needs K >= 2 and d >= 1: {self}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("per-class sample counts must be >= 1")
        means = self.class_means()
        if means.shape != (self.num_classes, self.dim):
            raise ConfigError(f"means must be {self.num_classes} x {self.dim}, got {means.shape}")
        if len({tuple(m) for m in means.tolist()}) != self.num_classes:
            raise ConfigError("class means must be pairwise distinct")

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        angles = 2.0 * np.pi * np.arange(self.num_classes) / self.num_classes
        means = np.zeros((self.num_classes, self.dim))
        means[:, 0] = self.radius * np.cos(angles)
        if self.dim > 1:
            means[:, 1] = self.radius * np.sin(angles)
        else:
            means[:, 0] = self.radius * np.arange(self.num_classes)
        return means


def make_blobs(spec: BlobSpec) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian classes; labels balanced, order interleaved by class."""
    rng = make_rng(spec.seed, 0xB10B)
    means = spec.class_means()

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        y = np.tile(np.arange(spec.num_classes), n)
        x = means[y] + spec.sigma * rng.standard_normal((y.size, spec.dim))
        return x, y

    xtr, ytr = draw(spec.n_train)
    xte, yte = draw(spec.n_test)
    train, test = with_train_stats(Dataset(xtr, ytr, "train"), Dataset(xte, yte, "test"))
    return train, test


def _read_idx(path: Path, magic: int, ndim: int) -> tuple[list[int], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated at offset 0, need 4-byte magic, file has {len(raw)} bytes")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}, need {header} bytes")
    dims = list(struct.unpack_from(f">{ndim}I", raw, 4))
    need = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload at offset {len(raw)}, need {need} bytes")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after offset {need}")
    return dims, raw[header:need]


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Unsigned-byte IDX images (N x rows x cols) and labels (N); pixels / 255."""
    (n, rows, cols), pix = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    (n_lab,), lab = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if n != n_lab:
        raise FormatError(f"{labels_path}: label count {n_lab} at offset 4 does not match "
                          f"{n} images in {images_path}")
    x = np.frombuffer(pix, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, split)


def write_idx(images: np.ndarray, labels: Sequence[int], images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for uint8 arrays (used for fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def restrict(dataset: Dataset, classes: Iterable[int]) -> Dataset:
    """Samples whose label is in ``classes``; labels are kept as-is."""
    classes = sorted(set(int(c) for c in classes))
    if not classes:
        raise UndefinedMetricError("restrict needs at least one class")
    mask = np.isin(dataset.y, classes)
    if not mask.any():
        raise UndefinedMetricError(f"no samples with labels in {classes}")
    return dataset.subset(mask)
