"""Hard-label black-box classifiers to be copied.

Every oracle maps a finite ``(n, d)`` batch to integer labels and, through
:meth:`Oracle.predict_onehot`, to one-hot rows. Oracles are immutable after
construction and safe to share between threads.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .datagen import LabeledDataset, StandardizationParams, as_points, load_csv, yinyang_label


class Oracle:
    kind = "abstract"

    def __init__(self, n_classes: int, d: int):
        if n_classes < 2:
            raise ValueError("an oracle needs at least 2 classes")
        if d < 1:
            raise ValueError("an oracle needs input dimension >= 1")
        self.n_classes = int(n_classes)
        self.d = int(d)

    def _labels(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, points) -> np.ndarray:
        """Integer class index for every row of ``points``."""
        points = as_points(points, self.d)
        return self._labels(points).astype(np.int64, copy=False)

    def predict_onehot(self, points) -> np.ndarray:
        labels = self.predict(points)
        out = np.zeros((len(labels), self.n_classes))
        out[np.arange(len(labels)), labels] = 1.0
        return out


def predict_onehot(oracle: Oracle, batch) -> np.ndarray:
    return oracle.predict_onehot(batch)


class NearestNeighborOracle(Oracle):
    """1-NN labeler under Euclidean distance; ties go to the lowest reference index."""

    kind = "nearest-neighbor"
    _chunk = 512

    def __init__(self, reference: LabeledDataset):
        if len(reference) == 0:
            raise ValueError("nearest-neighbor oracle needs a nonempty reference set")
        super().__init__(reference.n_classes, reference.d)
        self.reference = reference
        self._ref = reference.points.copy()
        self._ref.setflags(write=False)

    def _labels(self, points):
        out = np.empty(len(points), dtype=np.int64)
        for start in range(0, len(points), self._chunk):
            q = points[start : start + self._chunk]
            # explicit differences keep exact ties exact (no |a|^2 - 2ab + |b|^2 cancellation)
            d2 = ((q[:, None, :] - self._ref[None, :, :]) ** 2).sum(axis=2)
            out[start : start + len(q)] = self.reference.labels[np.argmin(d2, axis=1)]
        return out


def make_nn_oracle(reference: LabeledDataset) -> NearestNeighborOracle:
    return NearestNeighborOracle(reference)


def _spiral_rule(points):
    r = np.hypot(points[:, 0], points[:, 1])
    theta = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2 * np.pi)

    def radial_gap(base):
        k = np.maximum(np.round((r - base) / (2 * np.pi)), 0)
        return np.abs(r - (base + 2 * np.pi * k))

    gap0 = radial_gap(theta)
    gap1 = radial_gap(np.mod(theta + np.pi, 2 * np.pi))
    return (gap1 < gap0).astype(np.int64)


def _arc_distance(points, center, lower):
    rel = points - np.asarray(center)
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    on_arc = ang < 0 if lower else ang >= 0
    radial = np.abs(np.hypot(rel[:, 0], rel[:, 1]) - 1.0)
    ends = np.array([[1.0, 0.0], [-1.0, 0.0]])
    to_ends = np.min(np.hypot(rel[:, None, 0] - ends[:, 0], rel[:, None, 1] - ends[:, 1]), axis=1)
    return np.where(on_arc, radial, to_ends)


def _moons_rule(points):
    d0 = _arc_distance(points, (0.0, 0.0), lower=False)
    d1 = _arc_distance(points, (1.0, 0.5), lower=True)
    return (d1 < d0).astype(np.int64)


ANALYTIC_RULES = {"spirals": _spiral_rule, "moons": _moons_rule, "yinyang": yinyang_label}


class AnalyticOracle(Oracle):
    """Closed-form two-class rule matching one of the toy generators.

    If ``standardization`` is given, queries are assumed to live in the
    standardized space and are mapped back to generator coordinates first.
    """

    kind = "analytic-toy"

    def __init__(self, rule: str, standardization: StandardizationParams | None = None):
        if rule not in ANALYTIC_RULES:
            raise ValueError(f"unknown analytic rule {rule!r}; choose from {sorted(ANALYTIC_RULES)}")
        super().__init__(2, 2)
        self.rule = rule
        self.standardization = standardization

    def _labels(self, points):
        if self.standardization is not None:
            points = self.standardization.inverse(points)
        return ANALYTIC_RULES[self.rule](points)


class GridOracle(Oracle):
    """Lookup table on a rectilinear grid; a query takes the label of the nearest node.

    ``axes[j]`` holds the sorted node coordinates along feature ``j`` and
    ``table`` has shape ``tuple(len(a) for a in axes)``. Queries outside the
    grid snap to the boundary node.
    """

    kind = "csv-lookup-grid"

    def __init__(self, axes, table, n_classes: int | None = None):
        axes = [np.asarray(a, dtype=np.float64) for a in axes]
        table = np.asarray(table, dtype=np.int64)
        if table.shape != tuple(len(a) for a in axes):
            raise ValueError("grid table shape does not match the axes")
        for a in axes:
            if len(a) == 0 or np.any(np.diff(a) <= 0):
                raise ValueError("grid axes must be nonempty and strictly increasing")
        if table.min() < 0:
            raise ValueError("grid labels must be non-negative")
        super().__init__(n_classes or max(2, int(table.max()) + 1), len(axes))
        if table.max() >= self.n_classes:
            raise ValueError("grid label out of range")
        self.axes = axes
        self.table = table

    def _labels(self, points):
        idx = []
        for j, a in enumerate(self.axes):
            if len(a) == 1:
                idx.append(np.zeros(len(points), dtype=np.int64))
                continue
            hi = np.clip(np.searchsorted(a, points[:, j]), 1, len(a) - 1)
            lo = hi - 1
            # ties at a midpoint go to the lower node
            idx.append(np.where(points[:, j] - a[lo] <= a[hi] - points[:, j], lo, hi))
        return self.table[tuple(idx)]

    @classmethod
    def from_dataset(cls, data: LabeledDataset) -> "GridOracle":
        axes = [np.unique(data.points[:, j]) for j in range(data.d)]
        shape = tuple(len(a) for a in axes)
        if int(np.prod(shape)) != len(data):
            raise ValueError("CSV rows do not form a complete grid")
        table = np.full(shape, -1, dtype=np.int64)
        pos = tuple(np.searchsorted(a, data.points[:, j]) for j, a in enumerate(axes))
        table[pos] = data.labels
        if np.any(table < 0):
            raise ValueError("CSV rows do not form a complete grid")
        return cls(axes, table, data.n_classes)

    @classmethod
    def from_csv(cls, path) -> "GridOracle":
        return cls.from_dataset(load_csv(path))


def save_grid_csv(oracle: GridOracle, path) -> None:
    mesh = np.meshgrid(*oracle.axes, indexing="ij")
    coords = np.column_stack([m.ravel() for m in mesh])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(oracle.d)] + ["label"])
        for p, y in zip(coords, oracle.table.ravel()):
            w.writerow([repr(float(v)) for v in p] + [int(y)])
