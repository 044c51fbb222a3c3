"""Datasets: synthetic unit-norm regression data, CSV ingestion and sharding."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .rng import stream

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-12


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    y_max: float = 1.0

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataError(f"X has shape {X.shape} but y has {y.shape[0]} entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.y_max)

    def is_unit_norm(self, tol: float = UNIT_NORM_TOL) -> bool:
        return bool(np.all(np.abs(np.linalg.norm(self.X, axis=1) - 1.0) <= tol))


def _unit_rows(X: np.ndarray) -> np.ndarray:
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def _teacher_labels(X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # fixed random two-layer ReLU teacher
    hidden = 4 * X.shape[1]
    W = rng.standard_normal((hidden, X.shape[1]))
    v = rng.standard_normal(hidden)
    out = np.maximum(X @ W.T, 0.0) @ v / np.sqrt(hidden)
    out = out - out.mean()
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def gen_synthetic(n: int, d: int, seed: int, label_mode: str = "teacher_net") -> Dataset:
    """Sample ``n`` distinct unit-norm inputs in ``R^d`` with labels in [-1, 1].

    ``label_mode`` is ``"teacher_net"`` (outputs of a fixed random network,
    rescaled so the largest magnitude is 1) or ``"random_bounded"``
    (uniform on [-1, 1]).
    """
    if n < 1 or d < 1:
        raise DataError("n and d must be positive")
    if label_mode not in ("teacher_net", "random_bounded"):
        raise DataError(f"unknown label_mode {label_mode!r}")
    rng = stream(seed, 0, "data")
    X = _unit_rows(rng.standard_normal((n, d)))
    for _ in range(1000):
        dist = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)
        dist[np.diag_indices(n)] = np.inf
        clash = np.argwhere(dist < 1e-9)
        if clash.size == 0:
            break
        rows = np.unique(clash.max(axis=1))
        X[rows] = _unit_rows(rng.standard_normal((rows.size, d)))
    else:
        raise DataError(f"cannot draw {n} distinct unit vectors in dimension {d}")
    if label_mode == "teacher_net":
        y = _teacher_labels(X, rng)
    else:
        y = rng.uniform(-1.0, 1.0, size=n)
    return Dataset(X, y)


def _parse_row(row: list[str], lineno: int) -> list[float]:
    out = []
    for col, cell in enumerate(row):
        try:
            out.append(float(cell))
        except ValueError:
            raise DataError(f"line {lineno}, column {col + 1}: non-numeric value {cell!r}") from None
    return out


def load_csv(path, policy: str = "normalize", y_max: float = 1.0) -> Dataset:
    """Read ``d`` feature columns followed by one label column.

    A first row that does not parse as numbers is treated as a header.
    ``policy`` is ``"normalize"`` (rescale rows to unit norm) or ``"reject"``
    (raise if any row is not already unit norm). Labels beyond ``y_max`` are
    clamped with a warning.
    """
    if policy not in ("normalize", "reject"):
        raise DataError(f"unknown policy {policy!r}")
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1:
                try:
                    [float(c) for c in row]
                except ValueError:
                    continue
            values = _parse_row(row, lineno)
            if width is None:
                width = len(values)
                if width < 2:
                    raise DataError(f"line {lineno}: need at least one feature and a label")
            elif len(values) != width:
                raise DataError(f"line {lineno}: expected {width} columns, found {len(values)}")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    X, y = arr[:, :-1], arr[:, -1]
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        raise DataError(f"{path}: zero feature row cannot be normalized")
    if policy == "normalize":
        X = X / norms[:, None]
    elif np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        bad = int(np.argmax(np.abs(norms - 1.0) > UNIT_NORM_TOL))
        raise DataError(f"{path}: row {bad + 1} has norm {norms[bad]!r}, expected 1")
    over = np.abs(y) > y_max
    if np.any(over):
        log.warning("%s: clamping %d labels to [-%g, %g]", path, int(over.sum()), y_max, y_max)
        y = np.clip(y, -y_max, y_max)
    return Dataset(X, y, y_max)


def shard(data: Dataset, S: int, mode: str = "full_data", seed: int = 0) -> list[Dataset]:
    if S < 1:
        raise DataError("S must be positive")
    if mode == "full_data":
        return [data] * S
    if mode != "disjoint_shards":
        raise DataError(f"unknown shard mode {mode!r}")
    if data.n < S:
        raise DataError(f"cannot split {data.n} samples into {S} disjoint shards")
    order = stream(seed, 0, "shard").permutation(data.n)
    return [data.subset(np.sort(part)) for part in np.array_split(order, S)]
