"""Labeled feature-matrix datasets: loading, normalization and stratified splits.

Samples are stored as columns (``features`` is ``M x N``) and grouped
contiguously by class, class 1 first. Files are row-per-sample and are
transposed on load. Labels are 1-based everywhere.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import (
    DatasetError,
    DegenerateSampleError,
    DimensionMismatchError,
    MalformedHeaderError,
    NonFiniteError,
    SplitError,
    UnknownLabelError,
)

DATASET_MAGIC = b"XLDD"
_HEADER = struct.Struct("<4sIII")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledDataset:
    """Class-grouped feature matrix.

    Attributes:
        features: ``(M, N)`` float64 array, one sample per column.
        labels: ``(N,)`` int array with values in ``1..n_classes``, sorted.
        n_classes: number of classes ``C``; every class has at least one sample.
        order: for each stored column, its column index in the source data.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    order: np.ndarray = field(repr=False)

    def __post_init__(self):
        Y, y = self.features, self.labels
        if Y.ndim != 2 or y.ndim != 1 or Y.shape[1] != y.shape[0]:
            raise DimensionMismatchError(
                f"features {Y.shape} and labels {y.shape} do not align"
            )
        if not np.all(np.isfinite(Y)):
            raise NonFiniteError("features contain non-finite values")
        if y.size and (y.min() < 1 or y.max() > self.n_classes):
            raise UnknownLabelError(f"labels must lie in 1..{self.n_classes}")
        if np.any(np.diff(y) < 0):
            raise DatasetError("columns are not grouped by class")
        sizes = np.bincount(y, minlength=self.n_classes + 1)[1:]
        if np.any(sizes == 0):
            missing = [int(c) + 1 for c in np.flatnonzero(sizes == 0)]
            raise DatasetError(f"classes without samples: {missing}")

    @classmethod
    def from_arrays(cls, features, labels, n_classes: int | None = None) -> "LabeledDataset":
        """Validate and canonicalize (stable sort by label) arbitrary-order data."""
        Y = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels)
        if y.ndim != 1 or Y.ndim != 2 or Y.shape[1] != y.shape[0]:
            raise DimensionMismatchError(
                f"features {Y.shape} and labels {y.shape} do not align"
            )
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise UnknownLabelError("labels must be integers")
        y = y.astype(np.int64)
        if y.size and y.min() < 1:
            raise UnknownLabelError(f"label {int(y.min())} is not a positive class index")
        if n_classes is None:
            n_classes = int(y.max()) if y.size else 0
        perm = np.argsort(y, kind="stable")
        return cls(
            features=_readonly(np.ascontiguousarray(Y[:, perm])),
            labels=_readonly(y[perm]),
            n_classes=int(n_classes),
            order=_readonly(perm.astype(np.int64)),
        )

    @property
    def n_features(self) -> int:
        return self.features.shape[0]

    @property
    def n_samples(self) -> int:
        return self.features.shape[1]

    @property
    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes + 1)[1:]

    @property
    def class_offsets(self) -> np.ndarray:
        """Start column of each class block, plus the total as a final entry."""
        return np.concatenate([[0], np.cumsum(self.class_sizes)])

    def class_slice(self, c: int) -> slice:
        off = self.class_offsets
        return slice(int(off[c - 1]), int(off[c]))

    def class_block(self, c: int) -> np.ndarray:
        return self.features[:, self.class_slice(c)]

    def subset(self, columns) -> "LabeledDataset":
        columns = np.asarray(columns, dtype=np.int64)
        sub = LabeledDataset.from_arrays(
            self.features[:, columns], self.labels[columns], self.n_classes
        )
        return LabeledDataset(
            sub.features, sub.labels, sub.n_classes, _readonly(self.order[columns][sub.order])
        )


def normalize_columns(ds: LabeledDataset) -> LabeledDataset:
    """Scale every sample to unit Euclidean norm."""
    norms = np.linalg.norm(ds.features, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateSampleError(int(zero[0]))
    Y = ds.features / norms
    # a second pass removes the last-ulp drift so the operation is idempotent
    Y /= np.linalg.norm(Y, axis=0)
    return LabeledDataset(_readonly(Y), ds.labels, ds.n_classes, ds.order)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_samples(path, format: Literal["csv", "binary"] | None = None, allow_unlabeled=False):
    """Read raw rows in file order.

    Returns ``(features M x N, labels (N,), n_classes or None)``. With
    ``allow_unlabeled`` an empty CSV label cell yields label 0.
    """
    path = Path(path)
    fmt = format or _guess_format(path)
    if fmt == "csv":
        return (*_read_csv(path, allow_unlabeled), None)
    if fmt == "binary":
        return _read_binary(path)
    raise DatasetError(f"unknown dataset format {fmt!r}")


def load_dataset(path, format: Literal["csv", "binary"] | None = None,
                 n_classes: int | None = None) -> LabeledDataset:
    Y, y, C = read_samples(path, format)
    if n_classes is not None:
        C = n_classes if C is None else C
    if C is not None and y.size and y.max() > C:
        raise UnknownLabelError(f"label {int(y.max())} exceeds class count {C}")
    return LabeledDataset.from_arrays(Y, y, C)


def save_dataset(ds: LabeledDataset, path, format: Literal["csv", "binary"] | None = None) -> None:
    """Write in canonical column order."""
    path = Path(path)
    fmt = format or _guess_format(path)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"f{i + 1}" for i in range(ds.n_features)])
            for j in range(ds.n_samples):
                w.writerow([int(ds.labels[j])] + [repr(float(v)) for v in ds.features[:, j]])
    elif fmt == "binary":
        rec = np.dtype([("label", "<u4"), ("x", "<f8", (ds.n_features,))])
        data = np.empty(ds.n_samples, dtype=rec)
        data["label"] = ds.labels
        data["x"] = ds.features.T
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(DATASET_MAGIC, ds.n_features, ds.n_samples, ds.n_classes))
            fh.write(data.tobytes())
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")


def _guess_format(path: Path) -> str:
    return "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"


def _read_csv(path: Path, allow_unlabeled: bool):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedHeaderError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    M = len(header) - 1
    if M < 1 or header[0] != "label" or header[1:] != [f"f{i + 1}" for i in range(M)]:
        raise MalformedHeaderError(f"{path}: header must be label,f1,...,fM")
    body = [r for r in rows[1:] if r]
    labels = np.zeros(len(body), dtype=np.int64)
    Y = np.empty((M, len(body)))
    for j, row in enumerate(body):
        if len(row) != M + 1:
            raise DimensionMismatchError(
                f"{path}: row {j + 2} has {len(row) - 1} features, expected {M}"
            )
        cell = row[0].strip()
        if cell == "" and allow_unlabeled:
            labels[j] = 0
        else:
            try:
                lab = int(cell)
            except ValueError:
                raise UnknownLabelError(f"{path}: row {j + 2} label {cell!r} is not an integer") from None
            if lab < 1:
                raise UnknownLabelError(f"{path}: row {j + 2} label {lab} is not a positive class index")
            labels[j] = lab
        try:
            Y[:, j] = [float(v) for v in row[1:]]
        except ValueError:
            raise DatasetError(f"{path}: row {j + 2} has a non-numeric feature") from None
    if not np.all(np.isfinite(Y)):
        raise NonFiniteError(f"{path}: non-finite feature value")
    return Y, labels


def _read_binary(path: Path):
    raw = path.read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != DATASET_MAGIC:
        raise MalformedHeaderError(f"{path}: missing XLDD magic")
    _, M, N, C = _HEADER.unpack_from(raw)
    rec = np.dtype([("label", "<u4"), ("x", "<f8", (M,))])
    if len(raw) - _HEADER.size != N * rec.itemsize:
        raise DimensionMismatchError(
            f"{path}: header declares {N} records of {M} features, payload has "
            f"{len(raw) - _HEADER.size} bytes"
        )
    data = np.frombuffer(raw, dtype=rec, count=N, offset=_HEADER.size)
    labels = data["label"].astype(np.int64)
    if N and (labels.min() < 1 or labels.max() > C):
        raise UnknownLabelError(f"{path}: labels must lie in 1..{C}")
    Y = np.array(data["x"].T, dtype=np.float64)
    if not np.all(np.isfinite(Y)):
        raise NonFiniteError(f"{path}: non-finite feature value")
    return Y, labels, int(C)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """How to divide a dataset: ``per-class-count``, ``fraction`` or ``k-fold``."""

    mode: Literal["per-class-count", "fraction", "k-fold"]
    value: float
    seed: int = 0

    def validate(self, class_sizes) -> None:
        smallest = int(np.min(class_sizes))
        if self.mode == "per-class-count":
            if int(self.value) != self.value or self.value < 1:
                raise SplitError("per-class count must be a positive integer")
            if self.value > smallest:
                raise SplitError(
                    f"requested {int(self.value)} training samples per class but the "
                    f"smallest class has {smallest}"
                )
        elif self.mode == "fraction":
            if not 0 < self.value < 1:
                raise SplitError("fraction must lie in (0, 1)")
        elif self.mode == "k-fold":
            if int(self.value) != self.value or self.value < 2:
                raise SplitError("fold count must be an integer >= 2")
            if self.value > smallest:
                raise SplitError(f"{int(self.value)} folds exceed the smallest class size {smallest}")
        else:
            raise SplitError(f"unknown split mode {self.mode!r}")


def _class_permutations(ds: LabeledDataset, seed: int):
    rng = np.random.default_rng(seed)
    for c in range(1, ds.n_classes + 1):
        sl = ds.class_slice(c)
        yield c, sl.start + rng.permutation(sl.stop - sl.start)


def split(ds: LabeledDataset, spec: SplitSpec):
    """Stratified split.

    Returns ``(train, test)`` for count and fraction modes, or a list of ``k``
    ``(train, test)`` pairs for ``k-fold``. Deterministic given ``spec.seed``.
    """
    spec.validate(ds.class_sizes)
    if spec.mode == "k-fold":
        k = int(spec.value)
        folds = [[] for _ in range(k)]
        for _, perm in _class_permutations(ds, spec.seed):
            for f, part in enumerate(np.array_split(perm, k)):
                folds[f].append(part)
        out = []
        for f in range(k):
            test_idx = np.concatenate(folds[f])
            train_idx = np.concatenate([p for g in range(k) if g != f for p in folds[g]])
            out.append((ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))))
        return out

    train_idx, test_idx = [], []
    for c, perm in _class_permutations(ds, spec.seed):
        n = perm.size
        if spec.mode == "per-class-count":
            n_train = int(spec.value)
        else:
            n_train = min(max(int(np.floor(spec.value * n + 0.5)), 1), n)
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    train = ds.subset(np.sort(np.concatenate(train_idx)))
    test_cols = np.sort(np.concatenate(test_idx))
    if test_cols.size == 0:
        raise SplitError("split leaves no test samples")
    # classes left without test samples are reported by the subset validation
    return train, ds.subset(test_cols)
