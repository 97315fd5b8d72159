"""Labelled feature matrices and their CSV form.

CSV layout: a header row of feature names followed by a ``label`` column,
one sample per row, values as decimal reals and integer class ids.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError

LABEL_COLUMN = "label"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-d, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DatasetError(
                f"{self.labels.shape[0] if self.labels.ndim else 0} labels for "
                f"{self.features.shape[0]} rows"
            )
        if not np.isfinite(self.features).all():
            raise DatasetError("features contain NaN or Inf")
        if not self.feature_names:
            self.feature_names = [f"f{j}" for j in range(self.features.shape[1])]
        if len(self.feature_names) != self.features.shape[1]:
            raise DatasetError("feature_names length does not match feature count")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 1
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[indices], self.labels[indices], list(self.feature_names), self.n_classes
        )

    def feature_means(self) -> np.ndarray:
        return self.features.mean(axis=0)


@dataclass(frozen=True)
class Standardizer:
    """Affine feature transform ``(x - mean) / scale`` applied before modelling.

    Zero-masking then replaces a feature with its reference mean.
    """

    mean: tuple[float, ...]
    scale: tuple[float, ...]

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        features = np.asarray(features, dtype=np.float64)
        sd = features.std(axis=0)
        sd[sd == 0.0] = 1.0
        return cls(tuple(map(float, features.mean(axis=0))), tuple(map(float, sd)))

    def transform(self, dataset: Dataset) -> Dataset:
        mean = np.asarray(self.mean)
        scale = np.asarray(self.scale)
        if mean.shape != (dataset.n_features,):
            raise DatasetError("standardizer width does not match dataset")
        return Dataset(
            (dataset.features - mean) / scale,
            dataset.labels.copy(),
            list(dataset.feature_names),
            dataset.n_classes,
        )


def train_holdout_split(n: int, holdout_fraction: float, rng: np.random.Generator):
    """Shuffle ``range(n)`` and return ``(train_idx, holdout_idx)``."""
    if not 0.0 <= holdout_fraction < 1.0:
        raise DatasetError("holdout_fraction must lie in [0, 1)")
    perm = rng.permutation(n)
    n_hold = int(round(n * holdout_fraction))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*dataset.feature_names, LABEL_COLUMN])
    for row, label in zip(dataset.features, dataset.labels):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return buf.getvalue()


def write_csv(dataset: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(dataset_to_csv(dataset))


def read_csv(path: str | os.PathLike, n_classes: int | None = None) -> Dataset:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if LABEL_COLUMN not in header:
            raise DatasetError(f"{path}: no '{LABEL_COLUMN}' column in header")
        label_pos = header.index(LABEL_COLUMN)
        names = [h for i, h in enumerate(header) if i != label_pos]
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                labels.append(int(rec[label_pos]))
                rows.append([float(v) for i, v in enumerate(rec) if i != label_pos])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return Dataset(features, np.array(labels, dtype=np.int64), names, n_classes)
