"""Labeled datasets: synthetic Gaussian clusters, CSV loading/export, splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLIT_TAGS = ("train", "val", "test")


class DatasetError(ValueError):
    """Base class for dataset construction and loading problems."""


class EmptyDatasetError(DatasetError):
    pass


class NonNumericCellError(DatasetError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"non-numeric value {value!r} at row {row}, column {column!r}")
        self.row = row
        self.column = column


class DatasetFileNotFoundError(DatasetError, FileNotFoundError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...] | None = None
    split_tag: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {self.features.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.features):
            raise DatasetError("labels and features differ in length")
        if self.split_tag not in SPLIT_TAGS:
            raise DatasetError(f"unknown split tag {self.split_tag!r}")
        if self.num_classes is None:
            if self.class_names is not None:
                self.num_classes = len(self.class_names)
            else:
                self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("label id outside [0, C)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, split_tag: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_names,
                              split_tag or self.split_tag, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ClusterSpec:
    num_classes: int = 7
    input_dim: int = 32
    samples_per_class: int = 200
    class_center_radius: float = 3.0
    per_class_scales: tuple[float, ...] = field(
        default_factory=lambda: (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4))

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DatasetError("need at least two classes")
        if len(self.per_class_scales) != self.num_classes:
            raise DatasetError("per_class_scales must have one entry per class")
        if any(s <= 0 for s in self.per_class_scales):
            raise DatasetError("class scales must be positive")
        if self.samples_per_class < 2:
            raise DatasetError("samples_per_class must be at least 2")
        if self.input_dim < 1:
            raise DatasetError("input_dim must be positive")


def synth_clusters(spec: ClusterSpec, rng: np.random.Generator) -> LabeledDataset:
    """Isotropic Gaussian clusters with one noise scale per class.

    Centers sit on a sphere of radius ``class_center_radius`` along seeded
    random directions. Rows are grouped by class.
    """
    spec.validate()
    C, d, n = spec.num_classes, spec.input_dim, spec.samples_per_class
    dirs = rng.standard_normal((C, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = spec.class_center_radius * dirs
    noise = rng.standard_normal((C, n, d))
    scales = np.asarray(spec.per_class_scales, dtype=np.float64)
    X = (centers[:, None, :] + scales[:, None, None] * noise).reshape(C * n, d)
    y = np.repeat(np.arange(C), n)
    return LabeledDataset(X, y, None, "train", C)


def load_csv(path, label_column: str) -> LabeledDataset:
    """Read a header-first CSV; every column except ``label_column`` is a feature.

    String labels are mapped to dense ids in order of first appearance;
    integer-looking labels are used as ids directly.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetFileNotFoundError(f"no such dataset file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError(f"{path}: file is empty")
        if label_column not in header:
            raise DatasetError(f"{path}: label column {label_column!r} not in header")
        li = header.index(label_column)
        feat_cols = [j for j in range(len(header)) if j != li]
        rows, raw_labels = [], []
        for r, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DatasetError(f"{path}: row {r} has {len(rec)} cells, expected {len(header)}")
            vals = []
            for j in feat_cols:
                try:
                    v = float(rec[j])
                except ValueError:
                    raise NonNumericCellError(r, header[j], rec[j]) from None
                if not math.isfinite(v):
                    raise NonNumericCellError(r, header[j], rec[j])
                vals.append(v)
            rows.append(vals)
            raw_labels.append(rec[li].strip())
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    if all(_is_int(s) for s in raw_labels):
        labels = np.array([int(s) for s in raw_labels], dtype=np.int64)
        if labels.min() < 0:
            raise DatasetError(f"{path}: negative class id")
        names = None
    else:
        mapping: dict[str, int] = {}
        for s in raw_labels:
            mapping.setdefault(s, len(mapping))
        labels = np.array([mapping[s] for s in raw_labels], dtype=np.int64)
        names = tuple(mapping)
    return LabeledDataset(np.array(rows, dtype=np.float64).reshape(len(rows), len(feat_cols)),
                          labels, names, "train")


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def export_csv(dataset: LabeledDataset, path, label_column: str = "label") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.input_dim)] + [label_column])
        names = dataset.class_names
        for x, y in zip(dataset.features, dataset.labels):
            label = names[y] if names is not None else str(int(y))
            w.writerow([repr(float(v)) for v in x] + [label])


def split(dataset: LabeledDataset, fractions=(0.8, 0.2),
          rng: np.random.Generator | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified train/val split, deterministic under ``rng``.

    Per class, ``floor(f * n_c)`` samples go to each part; any remainder left
    by fractions summing below one is dropped.
    """
    f_train, f_val = (float(f) for f in fractions)
    if f_train < 0 or f_val < 0 or f_train + f_val <= 0 or f_train + f_val > 1 + 1e-12:
        raise DatasetError(f"invalid split fractions {fractions}")
    rng = rng if rng is not None else np.random.default_rng(0)
    parts = sum(f > 0 for f in (f_train, f_val))
    tr, va = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < parts:
            raise DatasetError(f"class {c} has {len(idx)} samples, fewer than {parts} split parts")
        idx = rng.permutation(idx)
        n_tr = int(math.floor(f_train * len(idx) + 1e-9))
        n_va = int(math.floor(f_val * len(idx) + 1e-9))
        tr.append(idx[:n_tr])
        va.append(idx[n_tr:n_tr + n_va])
    tr_idx = rng.permutation(np.concatenate(tr)) if tr else np.array([], dtype=np.int64)
    va_idx = rng.permutation(np.concatenate(va)) if va else np.array([], dtype=np.int64)
    return dataset.subset(tr_idx, "train"), dataset.subset(va_idx, "val")
