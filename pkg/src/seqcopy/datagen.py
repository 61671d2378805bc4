"""Synthetic query sampling, toy two-class datasets and preprocessing.

Point batches are plain ``float64`` arrays of shape ``(n, d)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def as_points(points, d: int | None = None) -> np.ndarray:
    """Validate and return a 2-D float64 point batch."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and d is not None and arr.size == d:
        arr = arr.reshape(1, d)
    if arr.ndim != 2:
        raise ValueError(f"point batch must be 2-D, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"dimension mismatch: expected {d} features, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point batch contains non-finite entries")
    return arr


@dataclass(frozen=True)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        points = as_points(self.points)
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or len(labels) != len(points):
            raise ValueError("labels must be a vector with one entry per point")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.points[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class StandardizationParams:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length")
        if np.any(std <= 0):
            raise ValueError("standard deviations must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def transform(self, points) -> np.ndarray:
        return (as_points(points, len(self.mean)) - self.mean) / self.std

    def inverse(self, points) -> np.ndarray:
        return as_points(points, len(self.mean)) * self.std + self.mean

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "StandardizationParams":
        doc = json.loads(text)
        return cls(np.array(doc["mean"]), np.array(doc["std"]))


# -- sampling distributions -------------------------------------------------


def draw_normal(n: int, d: int, rng_seed) -> np.ndarray:
    """``n`` i.i.d. standard normal points in ``d`` dimensions."""
    if n < 0 or d < 1:
        raise ValueError("need n >= 0 and d >= 1")
    rng = np.random.default_rng(rng_seed)
    return rng.standard_normal((n, d))


def draw_uniform(n: int, d: int, rng_seed, low=-1.0, high=1.0) -> np.ndarray:
    """``n`` points uniform over the box ``[low, high]^d`` (bounds may be per-axis)."""
    if n < 0 or d < 1:
        raise ValueError("need n >= 0 and d >= 1")
    low = np.broadcast_to(np.asarray(low, dtype=np.float64), (d,))
    high = np.broadcast_to(np.asarray(high, dtype=np.float64), (d,))
    if np.any(high <= low):
        raise ValueError("uniform box needs high > low on every axis")
    rng = np.random.default_rng(rng_seed)
    return low + (high - low) * rng.random((n, d))


@dataclass(frozen=True)
class Sampler:
    """Sampling distribution for synthetic queries.

    ``kind`` is ``"normal"`` (standard normal) or ``"uniform"`` over the box
    ``[low, high]^d``. Calls consume the supplied generator so one stream can
    feed a whole run.
    """

    d: int
    kind: str = "normal"
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("normal", "uniform"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.d < 1:
            raise ValueError("sampler dimension must be >= 1")

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "normal":
            return rng.standard_normal((n, self.d))
        return self.low + (self.high - self.low) * rng.random((n, self.d))


# -- toy datasets ------------------------------------------------------------
#
# All generators return exactly n/2 points per class, shuffled, in raw
# (unstandardized) coordinates. The matching closed-form labelers live in
# ``seqcopy.oracle``.

SPIRAL_START = 0.5 * np.pi


def _check_even(n: int) -> None:
    if n < 2 or n % 2:
        raise ValueError(f"n must be even and >= 2 for balanced classes, got {n}")


def _shuffle(points, labels, rng, n_classes=2) -> LabeledDataset:
    perm = rng.permutation(len(labels))
    return LabeledDataset(points[perm], labels[perm], n_classes)


def make_spirals(n: int, noise: float = 0.0, rng_seed=0, turns: float = 1.0) -> LabeledDataset:
    """Two interleaved Archimedean spirals.

    Arm 0 is ``r = phi`` at polar angle ``phi`` for
    ``phi in [pi/2, pi/2 + 2*pi*turns]``; arm 1 is arm 0 rotated by ``pi``.
    Starting away from the origin keeps the noiseless arms disjoint.
    """
    _check_even(n)
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(rng_seed)
    half = n // 2
    phi = SPIRAL_START + 2 * np.pi * turns * np.sqrt(rng.random((2, half)))
    arm0 = np.column_stack([phi[0] * np.cos(phi[0]), phi[0] * np.sin(phi[0])])
    arm1 = -np.column_stack([phi[1] * np.cos(phi[1]), phi[1] * np.sin(phi[1])])
    points = np.vstack([arm0, arm1]) + noise * rng.standard_normal((n, 2))
    labels = np.repeat([0, 1], half)
    return _shuffle(points, labels, rng)


def make_moons(n: int, noise: float = 0.0, rng_seed=0) -> LabeledDataset:
    """Two interleaving half circles.

    Class 0: ``(cos t, sin t)``; class 1: ``(1 - cos t, 0.5 - sin t)``, ``t in [0, pi]``.
    """
    _check_even(n)
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(rng_seed)
    half = n // 2
    t = np.pi * rng.random((2, half))
    upper = np.column_stack([np.cos(t[0]), np.sin(t[0])])
    lower = np.column_stack([1.0 - np.cos(t[1]), 0.5 - np.sin(t[1])])
    points = np.vstack([upper, lower]) + noise * rng.standard_normal((n, 2))
    labels = np.repeat([0, 1], half)
    return _shuffle(points, labels, rng)


def yinyang_label(points: np.ndarray) -> np.ndarray:
    """Closed-form yin-yang rule on the plane (disk of radius 1 at the origin).

    Class 1 is the left half plus the upper inner lobe, minus the upper dot;
    class 0 is the mirror image. The rule extends past the unit disk by the
    half-plane split, so it is total.
    """
    x, y = points[:, 0], points[:, 1]
    d_up = np.hypot(x, y - 0.5)
    d_dn = np.hypot(x, y + 0.5)
    label = (x < 0).astype(np.int64)
    label = np.where(d_up < 0.5, 1, label)
    label = np.where(d_dn < 0.5, 0, label)
    label = np.where(d_up < 0.15, 0, label)
    label = np.where(d_dn < 0.15, 1, label)
    return label


def make_yinyang(n: int, noise: float = 0.0, rng_seed=0) -> LabeledDataset:
    """Points uniform in the unit disk, labelled by :func:`yinyang_label`.

    Rejection sampling fills each class to exactly n/2 before noise is added.
    """
    _check_even(n)
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(rng_seed)
    half = n // 2
    buckets: list[list[np.ndarray]] = [[], []]
    counts = [0, 0]
    while min(counts) < half:
        r = np.sqrt(rng.random(2 * n))
        a = 2 * np.pi * rng.random(2 * n)
        cand = np.column_stack([r * np.cos(a), r * np.sin(a)])
        lab = yinyang_label(cand)
        for c in (0, 1):
            take = cand[lab == c][: half - counts[c]]
            buckets[c].append(take)
            counts[c] += len(take)
    points = np.vstack([np.vstack(buckets[0]), np.vstack(buckets[1])])
    points = points + noise * rng.standard_normal((n, 2))
    labels = np.repeat([0, 1], half)
    return _shuffle(points, labels, rng)


TOY_GENERATORS = {"spirals": make_spirals, "moons": make_moons, "yinyang": make_yinyang}


# -- preprocessing -----------------------------------------------------------


def standardize(data: LabeledDataset) -> tuple[LabeledDataset, StandardizationParams]:
    """Rescale every feature to zero mean and unit (population) variance."""
    if len(data) < 2:
        raise ValueError("standardization needs at least 2 samples")
    mean = data.points.mean(axis=0)
    std = data.points.std(axis=0)
    for j, s in enumerate(std):
        if not s > 0:
            raise ValueError(f"feature {j} has zero variance")
    params = StandardizationParams(mean, std)
    return LabeledDataset(params.transform(data.points), data.labels, data.n_classes), params


def split_stratified(data: LabeledDataset, test_fraction: float, rng_seed=0):
    """Per-class shuffled split with ``round(count * test_fraction)`` test points per class."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(rng_seed)
    counts = np.bincount(data.labels, minlength=data.n_classes)
    present = np.flatnonzero(counts)
    if len(present) < 2:
        raise ValueError("stratified split needs at least two classes present")
    train_idx, test_idx = [], []
    for c in present:
        if counts[c] < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        k = int(round(counts[c] * test_fraction))
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return data.subset(train_idx), data.subset(test_idx)


# -- CSV I/O -----------------------------------------------------------------


def load_csv(path, n_classes: int | None = None) -> LabeledDataset:
    """Read a numeric CSV with a header row and a final ``label`` column."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if not header or header[-1].strip() != "label":
            raise ValueError(f"{path}: last column must be 'label'")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    try:
        points = np.array([[float(v) for v in r[:-1]] for r in rows])
        labels = np.array([int(r[-1]) for r in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if points.shape[1] != len(header) - 1:
        raise ValueError(f"{path}: ragged rows")
    if n_classes is None:
        n_classes = max(2, int(labels.max()) + 1)
    return LabeledDataset(points, labels, n_classes)


def save_csv(data: LabeledDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(data.d)] + ["label"])
        for p, y in zip(data.points, data.labels):
            w.writerow([repr(float(v)) for v in p] + [int(y)])
