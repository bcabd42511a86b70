"""Synthetic generators, CSV I/O and the old/new class split."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .losses import ClassPartition
from .mathcore import ContractError


class DataFormatError(ValueError):
    """A data file could not be parsed or failed validation."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ContractError(f"features {x.shape} and labels {y.shape} do not align")
        if y.size == 0:
            raise ContractError("dataset is empty")
        if np.any(y < 0) or np.any(y >= self.class_count):
            raise ContractError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(x)):
            raise ContractError("features contain non-finite values")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class SplitSpec:
    old_fraction: float = 0.5
    seed: int = 0
    rule: str = "prefix"  # or "shuffle"

    def __post_init__(self):
        if not 0.0 < self.old_fraction < 1.0:
            raise ContractError("old_fraction must lie strictly between 0 and 1")
        if self.rule not in ("prefix", "shuffle"):
            raise ContractError(f"unknown split rule {self.rule!r}")


def _split_rngs(seed: int):
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train_ss), np.random.default_rng(test_ss)


def blob_centers(class_count: int, dim: int, radius: float) -> np.ndarray:
    centers = np.zeros((class_count, dim))
    angles = 2.0 * np.pi * np.arange(class_count) / class_count
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def gaussian_blobs(
    class_count: int,
    n_train: int,
    n_test: int,
    dim: int = 2,
    radius: float = 4.0,
    sigma: float = 0.5,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian classes whose means sit evenly on a circle in the first two axes.

    ``n_train``/``n_test`` are per-class counts.  Train and test are drawn from
    independent streams of the same seed.
    """
    if class_count < 2 or dim < 2 or n_train < 1 or n_test < 1:
        raise ContractError("need class_count >= 2, dim >= 2 and positive per-class counts")
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    centers = blob_centers(class_count, dim, radius)
    out = []
    for rng, n, split in zip(_split_rngs(seed), (n_train, n_test), ("train", "test")):
        y = np.repeat(np.arange(class_count), n)
        x = centers[y] + sigma * rng.standard_normal((y.size, dim))
        out.append(Dataset(x, y, class_count, split))
    return out[0], out[1]


def concentric_rings(
    class_count: int,
    n_train: int,
    n_test: int,
    noise: float = 0.1,
    seed: int = 0,
    radius_step: float = 1.0,
) -> tuple[Dataset, Dataset]:
    """Class ``c`` lies on a circle of radius ``(c + 1) * radius_step`` with radial noise."""
    if class_count < 2 or n_train < 1 or n_test < 1:
        raise ContractError("need class_count >= 2 and positive per-class counts")
    if noise < 0:
        raise ContractError("noise must be non-negative")
    out = []
    for rng, n, split in zip(_split_rngs(seed), (n_train, n_test), ("train", "test")):
        y = np.repeat(np.arange(class_count), n)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=y.size)
        r = (y + 1) * radius_step + noise * rng.standard_normal(y.size)
        x = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        out.append(Dataset(x, y, class_count, split))
    return out[0], out[1]


def save_csv(dataset: Dataset, path, header: bool = False) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            # repr round-trips float64 exactly
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, class_count: int | None = None, header: bool = False, split: str = "train") -> Dataset:
    """Read rows of D feature columns followed by an integer label column."""
    path = Path(path)
    rows, labels = [], []
    width = None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DataFormatError(f"{path}:{lineno}: expected at least one feature and a label")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
            try:
                feats = [float(v) for v in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in feats):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    if class_count is None:
        class_count = int(y.max()) + 1
    bad = np.flatnonzero((y < 0) | (y >= class_count))
    if bad.size:
        raise DataFormatError(f"{path}: label {y[bad[0]]} out of range [0, {class_count}) in data row {bad[0] + 1}")
    return Dataset(np.asarray(rows, dtype=np.float64), y, class_count, split)


def standardize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Zero-mean, unit-variance features using statistics of ``train`` only."""
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd[sd == 0] = 1.0
    return [replace(d, features=(d.features - mu) / sd) for d in (train, *others)]


def partition_classes(class_count: int, spec: SplitSpec) -> ClassPartition:
    if class_count < 2:
        raise ContractError("need at least two classes to split")
    n_old = math.ceil(spec.old_fraction * class_count)
    if not 0 < n_old < class_count:
        raise ContractError(f"old_fraction {spec.old_fraction} leaves one side of the split empty")
    order = np.arange(class_count)
    if spec.rule == "shuffle":
        order = np.random.default_rng(spec.seed).permutation(class_count)
    return ClassPartition(tuple(sorted(order[:n_old].tolist())), tuple(sorted(order[n_old:].tolist())))


def restrict_to_classes(dataset: Dataset, classes: Sequence[int]) -> tuple[Dataset, tuple[int, ...]]:
    """Keep samples whose label is in ``classes``; relabel densely in ``classes`` order.

    Returns the restricted dataset and the index map: ``class_map[dense] = original``.
    """
    class_map = tuple(int(c) for c in classes)
    if not class_map or len(set(class_map)) != len(class_map):
        raise ContractError("class set must be non-empty and free of duplicates")
    if any(c < 0 or c >= dataset.class_count for c in class_map):
        raise ContractError("class set is not a subset of the dataset classes")
    lookup = np.full(dataset.class_count, -1, dtype=np.int64)
    lookup[list(class_map)] = np.arange(len(class_map))
    mask = lookup[dataset.labels] >= 0
    if not mask.any():
        raise ContractError("restriction leaves no samples")
    restricted = Dataset(dataset.features[mask], lookup[dataset.labels[mask]], len(class_map), dataset.split)
    return restricted, class_map


def expand_predictions(dense_preds, class_map: Sequence[int]) -> np.ndarray:
    """Map dense predictions of a restricted model back to original class ids."""
    return np.asarray(class_map, dtype=np.int64)[np.asarray(dense_preds, dtype=np.int64)]
