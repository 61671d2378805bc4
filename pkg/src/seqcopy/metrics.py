"""Evaluation quantities for copies: accuracy, convergence speed, efficiency,
operational-point selection, and a finite-grid check of the subset-convergence
bound."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def copy_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ValueError("predictions and labels must be vectors of equal length")
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def _trapezoid(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(y[1:] + y[:-1]) / 2.0)


def accuracy_increments(acc_curve) -> np.ndarray:
    """Per-iteration gains ``A(t) - A(t-1)`` with ``A(-1) = 0``."""
    acc = np.asarray(acc_curve, dtype=np.float64)
    return np.diff(acc, prepend=0.0)


def conv_metric(acc_curve, increments: bool = False) -> float:
    """Normalized area under the accuracy-vs-iteration curve, ``t = 0..T`` at unit spacing.

    ``(1/T) * trapz(A) / max(A)``. With ``increments=True`` the curve of
    per-iteration accuracy gains is integrated instead.
    """
    curve = np.asarray(acc_curve, dtype=np.float64)
    if curve.ndim != 1 or len(curve) < 2:
        raise ValueError("conv needs a curve over at least two iterations")
    if increments:
        curve = accuracy_increments(curve)
    peak = curve.max()
    if not peak > 0:
        raise ValueError("conv is undefined for a curve without a positive maximum")
    T = len(curve) - 1
    return float(_trapezoid(curve) / (T * peak))


def steady_state_fraction(conv: float) -> float:
    """Fraction of the allotted iterations needed to reach steady state, ``2 * (1 - conv)``."""
    return 2.0 * (1.0 - conv)


def conv_interpretation(acc_curve, tol: float = 1e-3) -> str | None:
    """Human-readable reading of conv, or None when the curve is not (nearly) non-decreasing."""
    curve = np.asarray(acc_curve, dtype=np.float64)
    if np.any(np.diff(curve) < -tol):
        return None
    c = conv_metric(curve)
    return f"conv={c:.3f}: steady state reached at about {steady_state_fraction(c):.2f}T"


def eff_metric(sizes, n: int) -> float:
    """``1 - trapz(sizes) / (n * T^2 / 2)`` for working-set sizes over ``t = 0..T``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or len(sizes) < 2:
        raise ValueError("eff needs set sizes over at least two iterations (T >= 1)")
    if n < 1:
        raise ValueError("n must be >= 1")
    T = len(sizes) - 1
    return 1.0 - _trapezoid(sizes) / (n * T * T / 2.0)


def expected_sample_fraction(eff: float) -> float:
    if eff > 1:
        raise ValueError("eff cannot exceed 1")
    return (1.0 - eff) / 2.0


# -- operational points --------------------------------------------------------


@dataclass(frozen=True)
class MetricSummary:
    accuracy: float
    conv: float
    eff: float
    mean_rho: tuple[float, ...] = ()
    seed: int = 0
    delta: float = 0.0
    lambda0: float = 0.0
    label: str = ""

    def __post_init__(self):
        for name in ("accuracy", "conv", "eff"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass
class OperationalPoints:
    qualifying: list[MetricSummary] = field(default_factory=list)
    best_accuracy: MetricSummary | None = None
    best_efficiency: MetricSummary | None = None
    best_convergence: MetricSummary | None = None

    @property
    def found(self) -> bool:
        return bool(self.qualifying)

    def to_dict(self) -> dict:
        def pack(m):
            if m is None:
                return None
            return {
                "label": m.label, "delta": m.delta, "lambda0": m.lambda0, "seed": m.seed,
                "accuracy": m.accuracy, "conv": m.conv, "eff": m.eff,
            }

        return {
            "status": "ok" if self.found else "no qualifying configuration",
            "n_qualifying": len(self.qualifying),
            "best_accuracy": pack(self.best_accuracy),
            "best_efficiency": pack(self.best_efficiency),
            "best_convergence": pack(self.best_convergence),
        }


def select_operational_points(runs, single_pass_accuracy: float, band: float = 0.95) -> OperationalPoints:
    """Best accuracy / efficiency / convergence among runs with ``A_seq / A_single > band``.

    Ties on the primary criterion are broken by higher eff, then higher conv,
    then lower delta, then lower seed and label, so the result does not
    depend on input order.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("no runs to select from")
    if not single_pass_accuracy > 0:
        raise ValueError("single-pass accuracy must be positive")
    qualifying = [r for r in runs if r.accuracy / single_pass_accuracy > band]
    out = OperationalPoints(qualifying=sorted(qualifying, key=_tiebreak))
    if not qualifying:
        return out

    def best(primary):
        return min(qualifying, key=lambda r: (-primary(r), _tiebreak(r)))

    out.best_accuracy = best(lambda r: r.accuracy)
    out.best_efficiency = best(lambda r: r.eff)
    out.best_convergence = best(lambda r: r.conv)
    return out


def _tiebreak(r: MetricSummary):
    return (-r.eff, -r.conv, r.delta, r.seed, r.label, -r.accuracy)


# -- subset-convergence check on a finite parameter grid -------------------------


@dataclass
class ConvergenceReport:
    sizes: list[int]
    sup_diff: list[float]
    bound: list[int]
    bound_holds: list[bool]
    argmax: list[int]
    full_argmax: int
    stable_from: int | None

    @property
    def all_bounds_hold(self) -> bool:
        return all(self.bound_holds)

    @property
    def stabilized(self) -> bool:
        return self.stable_from is not None


def threshold_rho_sq(points, labels, thetas, sharpness: float | None = 10.0) -> np.ndarray:
    """Squared uncertainty of a 1-D two-class threshold copy, shape ``(len(thetas), len(points))``.

    The copy predicts ``p(class 1) = sigmoid(sharpness * (z - theta))``; with
    ``sharpness=None`` it outputs hard one-hot decisions ``z > theta``.
    """
    z = np.asarray(points, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    th = np.asarray(thetas, dtype=np.float64).ravel()
    if sharpness is None:
        p1 = (z[None, :] > th[:, None]).astype(np.float64)
    else:
        p1 = 1.0 / (1.0 + np.exp(-sharpness * (z[None, :] - th[:, None])))
    # two classes: ||(1-p1, p1) - onehot||^2 / 2 = (p1 - y)^2
    return (p1 - y[None, :]) ** 2


def check_theorem_convergence(rho_sq, gamma: float = 1.0, sizes=None, subsets=None) -> ConvergenceReport:
    """Check ``sup_theta |F - F_i| <= |S minus S_i|`` and argmax stabilization.

    ``rho_sq[j, k]`` is the squared uncertainty of grid parameter ``j`` on
    master-set point ``k``; ``F_i(theta) = sum over S_i of exp(-gamma * rho^2)``.
    Nested subsets are given either as increasing prefix ``sizes`` or as
    explicit index collections ``subsets``; non-nested input is rejected.
    """
    rho_sq = np.asarray(rho_sq, dtype=np.float64)
    if rho_sq.ndim != 2 or rho_sq.shape[1] == 0:
        raise ValueError("rho_sq must be a (n_theta, n_points) matrix")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    n_pts = rho_sq.shape[1]
    if (sizes is None) == (subsets is None):
        raise ValueError("give exactly one of sizes or subsets")
    if sizes is not None:
        sizes = [int(s) for s in sizes]
        if any(b < a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 0 or sizes[-1] > n_pts:
            raise ValueError("subset sizes must be non-decreasing and within the master set")
        subsets = [np.arange(s) for s in sizes]
    else:
        subsets = [np.unique(np.asarray(s, dtype=np.int64)) for s in subsets]
        for a, b in zip(subsets, subsets[1:]):
            if not np.all(np.isin(a, b)):
                raise ValueError("subsets are not nested")
        if any(len(s) and (s.min() < 0 or s.max() >= n_pts) for s in subsets):
            raise ValueError("subset index out of range")

    terms = np.exp(-gamma * rho_sq)
    full = terms.sum(axis=1)
    full_arg = int(np.argmax(full))
    sup_diff, bound, holds, args = [], [], [], []
    for s in subsets:
        inside = np.zeros(n_pts, dtype=bool)
        inside[s] = True
        f_i = terms[:, inside].sum(axis=1)
        # F - F_i is the sum over the missing points; summing it directly keeps
        # the comparison free of cancellation error
        diff = float(np.max(terms[:, ~inside].sum(axis=1)))
        missing = int(n_pts - inside.sum())
        sup_diff.append(diff)
        bound.append(missing)
        holds.append(diff <= missing)
        args.append(int(np.argmax(f_i)))
    stable_from = None
    for i in range(len(args)):
        if all(a == full_arg for a in args[i:]):
            stable_from = i
            break
    return ConvergenceReport(
        sizes=[len(s) for s in subsets],
        sup_diff=sup_diff,
        bound=bound,
        bound_holds=holds,
        argmax=args,
        full_argmax=full_arg,
        stable_from=stable_from,
    )
