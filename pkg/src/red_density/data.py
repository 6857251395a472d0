"""Dataset ingestion, standardization, noise injection and splitting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (
    ContractError,
    DataError,
    LabelDomainError,
    MissingColumnError,
    ParseError,
    RaggedRowError,
)

STD_FLOOR = 1e-6


@dataclass
class Dataset:
    X: np.ndarray
    labels: np.ndarray | None = None
    column_names: list = field(default_factory=list)
    source: str = ""
    n_rejected: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ContractError(f"X must be 2-d, got shape {self.X.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.X.shape[0],):
                raise ContractError("labels must have one entry per row")
        if not self.column_names:
            self.column_names = [f"x{j}" for j in range(self.X.shape[1])]

    def __len__(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.X[idx], labels, list(self.column_names), self.source)

    def inliers(self) -> "Dataset":
        """Rows not flagged as anomalies (all rows when unlabeled)."""
        if self.labels is None:
            return self
        return self.subset(np.flatnonzero(self.labels == 0))


def load_csv(path, has_header=True, label_column=None, delimiter=",") -> Dataset:
    """Read a numeric CSV.

    Rows containing NaN or infinite values are dropped and counted in
    ``Dataset.n_rejected``. Row and column numbers in error messages are
    1-based, counting data rows only (the header is not a row).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f, delimiter=delimiter))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no rows")
    if has_header:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
    else:
        names = [f"x{j}" for j in range(len(rows[0]))]
    ncol = len(names)

    label_idx = None
    if label_column is not None:
        if isinstance(label_column, int) and not has_header:
            label_idx = label_column
        elif label_column in names:
            label_idx = names.index(label_column)
        else:
            raise MissingColumnError(f"{path}: label column {label_column!r} not found in {names}")

    values = np.empty((len(rows), ncol))
    for r, row in enumerate(rows, 1):
        if len(row) != ncol:
            raise RaggedRowError(f"{path}: row {r} has {len(row)} fields, expected {ncol}", row=r)
        for c, cell in enumerate(row):
            try:
                values[r - 1, c] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: cannot parse {cell!r} as a number at row {r}, column {c + 1}", row=r, column=c + 1
                ) from None

    labels = None
    if label_idx is not None:
        raw = values[:, label_idx]
        bad = np.flatnonzero(~np.isin(raw, (0.0, 1.0)))
        if bad.size:
            r = int(bad[0]) + 1
            raise LabelDomainError(f"{path}: label at row {r} is {raw[bad[0]]!r}, expected 0 or 1", row=r)
        labels = raw.astype(np.int64)
        keep_cols = [j for j in range(ncol) if j != label_idx]
        values = values[:, keep_cols]
        names = [names[j] for j in keep_cols]

    finite = np.all(np.isfinite(values), axis=1)
    n_rejected = int(np.sum(~finite))
    if labels is not None:
        labels = labels[finite]
    return Dataset(values[finite], labels, names, str(path), n_rejected)


class Standardizer(TransformerMixin, BaseEstimator):
    """Per-column z-scoring with the population (1/N) standard deviation.

    Standard deviations below ``std_floor`` are raised to it, so constant
    columns map to zeros instead of dividing by zero.
    """

    def __init__(self, std_floor=STD_FLOOR):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise ContractError("need at least two rows to fit a standardizer")
        self.mean_ = X.mean(axis=0)
        self.scale_ = np.maximum(X.std(axis=0), self.std_floor)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        self._check_width(X)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        self._check_width(X)
        return X * self.scale_ + self.mean_

    def log_abs_det(self) -> float:
        """``log|det|`` of the transform's Jacobian (for density unit changes)."""
        check_is_fitted(self)
        return float(-np.sum(np.log(self.scale_)))

    def _check_width(self, X):
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")

    def to_dict(self):
        return {"mean": self.mean_.tolist(), "scale": self.scale_.tolist(), "std_floor": self.std_floor}

    @classmethod
    def from_dict(cls, payload):
        s = cls(std_floor=payload.get("std_floor", STD_FLOOR))
        s.mean_ = np.asarray(payload["mean"], dtype=np.float64)
        s.scale_ = np.asarray(payload["scale"], dtype=np.float64)
        s.n_features_in_ = s.mean_.shape[0]
        return s


def fit_standardize(train: Dataset) -> Standardizer:
    return Standardizer().fit(train.X)


def apply_standardize(scaler: Standardizer, ds: Dataset) -> Dataset:
    return Dataset(scaler.transform(ds.X), ds.labels, list(ds.column_names), ds.source)


def add_noise(X, std, rng):
    """``X`` plus independent ``N(0, std^2)`` noise; ``std == 0`` returns ``X`` unchanged."""
    if std < 0:
        raise ContractError("noise std must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    if std == 0:
        return X
    return X + std * rng.standard_normal(X.shape)


def _split_counts(n, fractions):
    # largest-remainder rounding so counts sum to n exactly
    raw = [f * n for f in fractions]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), rng=None, stratify_labels=False):
    """Seeded random partition into ``(train, val, test)``.

    With ``stratify_labels`` the anomalies and the inliers are split separately
    so each part keeps the anomaly share up to rounding.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ContractError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))
    n = len(ds)
    if stratify_labels and ds.labels is not None:
        groups = [np.flatnonzero(ds.labels == v) for v in (0, 1)]
    else:
        groups = [np.arange(n)]
    parts = [[], [], []]
    for g in groups:
        g = g[rng.permutation(g.size)]
        bounds = np.cumsum([0] + _split_counts(g.size, fractions))
        for k in range(3):
            parts[k].append(g[bounds[k] : bounds[k + 1]])
    out = []
    for name, p in zip(("train", "val", "test"), parts):
        idx = np.sort(np.concatenate(p))
        if idx.size < 1:
            raise ContractError(f"{name} split would be empty for {n} rows and fractions {fractions}")
        out.append(ds.subset(idx))
    return tuple(out)


@dataclass
class DatasetManifest:
    path: str
    label_column: str | None = None
    has_header: bool = True
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    stratify: bool = True

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        path = Path(d.pop("path"))
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        known = {"label_column", "has_header", "split", "seed", "stratify"}
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown dataset manifest keys: {sorted(extra)}")
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(str(path), **d)

    @classmethod
    def read(cls, path):
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)


@dataclass
class PreparedData:
    train: Dataset
    val: Dataset
    test: Dataset
    scaler: Standardizer
    raw_train: Dataset


def prepare(manifest: DatasetManifest) -> PreparedData:
    """load -> split -> standardize (fit on train). Noise is added by training."""
    ds = load_csv(manifest.path, has_header=manifest.has_header, label_column=manifest.label_column)
    rng = np.random.Generator(np.random.PCG64(manifest.seed))
    tr, va, te = split(ds, manifest.split, rng, stratify_labels=manifest.stratify)
    scaler = fit_standardize(tr)
    return PreparedData(
        apply_standardize(scaler, tr), apply_standardize(scaler, va), apply_standardize(scaler, te), scaler, tr
    )
