"""Multivariate series containers, standardization and sliding windows."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class SeriesError(ValueError):
    """Raised for malformed series, windows or standardization stats."""


class EmptyInputError(SeriesError):
    pass


class DegenerateDimensionError(SeriesError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MultivariateSeries:
    """A T x d matrix of observations with optional per-step anomaly labels."""

    values: np.ndarray
    labels: Optional[np.ndarray] = None
    dim_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise SeriesError(f"values must be a non-empty T x d matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise SeriesError(f"non-finite value at step {bad[0]}, dim {bad[1]}")
        object.__setattr__(self, "values", _frozen(values))
        if self.labels is not None:
            labels = np.asarray(self.labels).astype(bool)
            if labels.shape != (values.shape[0],):
                raise SeriesError(f"labels must have length {values.shape[0]}, got {labels.shape}")
            labels = labels.copy()
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
        if self.dim_names is not None:
            names = tuple(str(n) for n in self.dim_names)
            if len(names) != values.shape[1]:
                raise SeriesError(f"expected {values.shape[1]} dim names, got {len(names)}")
            object.__setattr__(self, "dim_names", names)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def names(self) -> tuple[str, ...]:
        return self.dim_names or tuple(f"x{j}" for j in range(self.d))

    def slice(self, start: int, stop: int) -> "MultivariateSeries":
        labels = None if self.labels is None else self.labels[start:stop]
        return MultivariateSeries(self.values[start:stop], labels, self.dim_names)

    def with_values(self, values: np.ndarray) -> "MultivariateSeries":
        return MultivariateSeries(values, self.labels, self.dim_names)


@dataclass(frozen=True)
class Window:
    values: np.ndarray
    end_index: int

    def __post_init__(self):
        K = self.values.shape[0]
        if K < 2:
            raise SeriesError("a window needs at least one lag plus the target step")
        if self.end_index < K - 1:
            raise SeriesError(f"end_index {self.end_index} < K-1 = {K - 1}")

    @property
    def K(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = _frozen(np.atleast_1d(self.mean))
        std = _frozen(np.atleast_1d(self.std))
        if mean.shape != std.shape or mean.ndim != 1:
            raise SeriesError("mean and std must be 1-d arrays of equal length")
        if np.any(~(std > 0)):
            j = int(np.flatnonzero(~(std > 0))[0])
            raise DegenerateDimensionError(f"dimension {j} has non-positive std")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def to_json(self) -> dict:
        return {"schema": 1, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "StandardizationStats":
        return cls(np.array(obj["mean"]), np.array(obj["std"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "StandardizationStats":
        return cls.from_json(json.loads(Path(path).read_text()))


def sliding_windows(series: MultivariateSeries, K: int) -> list[Window]:
    """All length-K windows of ``series``; window i ends at step K-1+i."""
    if K < 2:
        raise SeriesError("K must be >= 2")
    if series.T < K:
        raise EmptyInputError(f"series length {series.T} shorter than window {K}")
    view = window_array(series.values, K)
    return [Window(view[i], K - 1 + i) for i in range(view.shape[0])]


def window_array(values: np.ndarray, K: int) -> np.ndarray:
    """Read-only (T-K+1, K, d) strided view of all windows."""
    values = np.asarray(values)
    if values.shape[0] < K:
        raise EmptyInputError(f"series length {values.shape[0]} shorter than window {K}")
    view = np.lib.stride_tricks.sliding_window_view(values, K, axis=0)
    return view.transpose(0, 2, 1)


def fit_standardizer(series: MultivariateSeries) -> StandardizationStats:
    if series.T < 2:
        raise SeriesError("need at least two steps to fit a standardizer")
    mean = series.values.mean(axis=0)
    std = series.values.std(axis=0)
    names = series.names()
    for j in range(series.d):
        if not std[j] > 0:
            raise DegenerateDimensionError(f"dimension {names[j]!r} is constant")
    return StandardizationStats(mean, std)


def _check_dims(series: MultivariateSeries, stats: StandardizationStats) -> None:
    if series.d != stats.d:
        raise SeriesError(f"stats have {stats.d} dims, series has {series.d}")


def apply_standardizer(series: MultivariateSeries, stats: StandardizationStats) -> MultivariateSeries:
    _check_dims(series, stats)
    return series.with_values((series.values - stats.mean) / stats.std)


def invert_standardizer(series: MultivariateSeries, stats: StandardizationStats) -> MultivariateSeries:
    _check_dims(series, stats)
    return series.with_values(series.values * stats.std + stats.mean)


def read_csv(path) -> MultivariateSeries:
    """Read a series CSV: header of dim names, optional trailing ``label`` column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise EmptyInputError(f"{path}: no data rows")
    header = [h.strip() for h in rows[0]]
    has_label = header[-1] == "label"
    names = header[:-1] if has_label else header
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    if has_label:
        return MultivariateSeries(data[:, :-1], data[:, -1] != 0, names)
    return MultivariateSeries(data, None, names)


def write_csv(series: MultivariateSeries, path, *, include_labels: bool = True) -> None:
    names = list(series.names())
    with_labels = include_labels and series.labels is not None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + (["label"] if with_labels else []))
        for t in range(series.T):
            row = [repr(float(v)) for v in series.values[t]]
            if with_labels:
                row.append(int(series.labels[t]))
            w.writerow(row)


def write_matrix_csv(values: np.ndarray, names: Sequence[str], path) -> None:
    write_csv(MultivariateSeries(values, None, tuple(names)), path, include_labels=False)
