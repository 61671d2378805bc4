"""The copy model: a dense ReLU network with a softmax head, trained on the
squared normalized distance to the oracle's one-hot labels.

Parameters live in one flat float64 vector; per-layer weight and bias arrays
are reshaped views into it. That keeps the memory penalty, Adam and
serialization trivial.
"""

from __future__ import annotations

import base64
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import adam_steps
from .datagen import as_points

DEFAULT_WIDTHS = (64, 32, 10)


@dataclass(frozen=True)
class Architecture:
    d: int
    widths: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        if self.d < 1 or self.n_classes < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid architecture {self}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = (self.d, *self.widths, self.n_classes)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_sizes)

    def split(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer ``(W, b)`` views into a flat vector; ``W`` has shape ``(fan_in, fan_out)``."""
        out, pos = [], 0
        for i, o in self.layer_sizes:
            w = flat[pos : pos + i * o].reshape(i, o)
            pos += i * o
            b = flat[pos : pos + o]
            pos += o
            out.append((w, b))
        return out


class CopyNet:
    def __init__(self, arch: Architecture, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got shape {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.arch = arch
        self.params = params

    @classmethod
    def init(cls, d, n_classes, widths=DEFAULT_WIDTHS, rng_seed=None) -> "CopyNet":
        """He-style init: weights ~ N(0, 2/fan_in), biases zero."""
        arch = Architecture(d, tuple(widths), n_classes)
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        params = np.zeros(arch.n_params)
        for w, _ in arch.split(params):
            w[...] = rng.standard_normal(w.shape) * math.sqrt(2.0 / w.shape[0])
        return cls(arch, params)

    @classmethod
    def zeros(cls, d, n_classes, widths=DEFAULT_WIDTHS) -> "CopyNet":
        arch = Architecture(d, tuple(widths), n_classes)
        return cls(arch, np.zeros(arch.n_params))

    @property
    def d(self) -> int:
        return self.arch.d

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def layers(self):
        return self.arch.split(self.params)

    def with_params(self, params) -> "CopyNet":
        return CopyNet(self.arch, params)

    def copy(self) -> "CopyNet":
        return CopyNet(self.arch, self.params.copy())

    def __eq__(self, other):
        return (
            isinstance(other, CopyNet)
            and self.arch == other.arch
            and np.array_equal(self.params, other.params)
        )

    def predict(self, batch) -> np.ndarray:
        return np.argmax(forward(self, batch), axis=1)

    # serialization: architecture header, then row-major W and b per layer, float64

    def to_json(self) -> str:
        doc = {"d": self.d, "widths": list(self.arch.widths), "n_classes": self.n_classes, "layers": []}
        for w, b in self.layers():
            doc["layers"].append({"weight": w.tolist(), "bias": b.tolist()})
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "CopyNet":
        doc = json.loads(text)
        arch = Architecture(int(doc["d"]), tuple(doc["widths"]), int(doc["n_classes"]))
        parts = []
        for layer, (i, o) in zip(doc["layers"], arch.layer_sizes, strict=True):
            w = np.asarray(layer["weight"], dtype=np.float64)
            b = np.asarray(layer["bias"], dtype=np.float64)
            if w.shape != (i, o) or b.shape != (o,):
                raise ValueError("layer shapes do not match the architecture header")
            parts += [w.ravel(), b]
        return cls(arch, np.concatenate(parts))

    _MAGIC = b"SQCN"

    def to_bytes(self) -> bytes:
        widths = self.arch.widths
        head = struct.pack(f"<4sIII{len(widths)}I", self._MAGIC, self.d, self.n_classes, len(widths), *widths)
        return head + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CopyNet":
        magic, d, n_classes, depth = struct.unpack_from("<4sIII", blob)
        if magic != cls._MAGIC:
            raise ValueError("not a serialized CopyNet")
        widths = struct.unpack_from(f"<{depth}I", blob, 16)
        arch = Architecture(d, widths, n_classes)
        body = blob[16 + 4 * depth :]
        if len(body) != 8 * arch.n_params:
            raise ValueError("parameter block has the wrong length")
        return cls(arch, np.frombuffer(body, dtype="<f8").astype(np.float64))

    def to_base64(self) -> str:
        return base64.b64encode(self.to_bytes()).decode("ascii")


# -- forward pass, uncertainty, risk ------------------------------------------


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_params(arch, params, x):
    a = x
    layers = arch.split(params)
    for w, b in layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
    w, b = layers[-1]
    return _softmax(a @ w + b)


def forward(net: CopyNet, batch) -> np.ndarray:
    """Class-probability rows for every point in ``batch``."""
    x = as_points(batch, net.d)
    return _forward_params(net.arch, net.params, x)


def uncertainty_rho(copy_probs, oracle_label, n_classes: int | None = None) -> float:
    """Euclidean distance between a probability vector and a one-hot label, divided by sqrt(n_c)."""
    p = np.asarray(copy_probs, dtype=np.float64)
    y = np.asarray(oracle_label, dtype=np.float64)
    if n_classes is None:
        n_classes = len(y)
    if p.shape != (n_classes,) or y.shape != (n_classes,):
        raise ValueError(f"both vectors must have length {n_classes}")
    return float(np.sqrt(np.sum((p - y) ** 2) / n_classes))


def rho_batch(probs: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Row-wise :func:`uncertainty_rho`."""
    if probs.shape != onehot.shape:
        raise ValueError("probability and label matrices must have equal shapes")
    return np.sqrt(np.sum((probs - onehot) ** 2, axis=1) / probs.shape[1])


def net_rho(net: CopyNet, points, onehot) -> np.ndarray:
    return rho_batch(forward(net, points), np.asarray(onehot, dtype=np.float64))


def _check_set(sset, net):
    if len(sset.points) == 0:
        raise ValueError("synthetic set is empty")
    if sset.points.shape[1] != net.d or sset.onehot.shape[1] != net.n_classes:
        raise ValueError("synthetic set does not match the network's input/output sizes")


def empirical_risk(net: CopyNet, sset) -> float:
    """Mean squared uncertainty over the set."""
    _check_set(sset, net)
    probs = _forward_params(net.arch, net.params, sset.points)
    return float(np.sum((probs - sset.onehot) ** 2) / (net.n_classes * len(probs)))


def _check_compatible(net, prev):
    if prev.arch != net.arch:
        raise ValueError("parameter sets have different architectures")


def memory_distance(net: CopyNet, theta_prev: CopyNet) -> float:
    _check_compatible(net, theta_prev)
    return float(np.linalg.norm(net.params - theta_prev.params))


def loss_with_memory(net: CopyNet, sset, theta_prev: CopyNet | None, lam: float) -> float:
    """Empirical risk plus ``lam`` times the (unsquared) L2 distance to ``theta_prev``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    risk = empirical_risk(net, sset)
    if theta_prev is None or lam == 0:
        if theta_prev is not None:
            _check_compatible(net, theta_prev)
        return risk
    return risk + lam * memory_distance(net, theta_prev)


# -- gradient ------------------------------------------------------------------


def _loss_grad(arch, params, x, y, prev=None, lam=0.0, out=None):
    """Loss and flat gradient of mean-rho^2 (+ lam*||params - prev||) on one batch."""
    layers = arch.split(params)
    acts = [x]
    pre = []
    a = x
    for w, b in layers[:-1]:
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0)
        acts.append(a)
    w_out, b_out = layers[-1]
    probs = _softmax(a @ w_out + b_out)

    scale = arch.n_classes * len(x)
    diff = probs - y
    loss = float(np.sum(diff * diff) / scale)
    dp = diff * (2.0 / scale)
    dz = probs * (dp - np.sum(dp * probs, axis=1, keepdims=True))

    grad = np.empty(arch.n_params) if out is None else out
    glayers = arch.split(grad)
    for li in range(len(layers) - 1, -1, -1):
        gw, gb = glayers[li]
        np.matmul(acts[li].T, dz, out=gw)
        np.sum(dz, axis=0, out=gb)
        if li:
            # rectifier subgradient is 0 at the kink
            dz = (dz @ layers[li][0].T) * (pre[li - 1] > 0)

    if prev is not None and lam != 0:
        delta = params - prev
        dist = math.sqrt(float(delta @ delta))
        loss += lam * dist
        if dist > 0:
            grad += (lam / dist) * delta
    return loss, grad


def gradient(net: CopyNet, sset, theta_prev: CopyNet | None = None, lam: float = 0.0) -> np.ndarray:
    """Exact gradient of :func:`loss_with_memory`, flat and aligned with ``net.params``."""
    _check_set(sset, net)
    prev = None
    if theta_prev is not None:
        _check_compatible(net, theta_prev)
        prev = theta_prev.params
    return _loss_grad(net.arch, net.params, sset.points, sset.onehot, prev, lam)[1]


# -- Adam --------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def fresh(cls, net: CopyNet, lr: float = 5e-4, **kw) -> "OptimizerState":
        return cls(np.zeros_like(net.params), np.zeros_like(net.params), lr=lr, **kw)

    def copy(self) -> "OptimizerState":
        return replace(self, m=self.m.copy(), v=self.v.copy())


def _adam_inplace(params, grad, opt: OptimizerState) -> None:
    opt.step += 1
    opt.m *= opt.beta1
    opt.m += (1 - opt.beta1) * grad
    opt.v *= opt.beta2
    opt.v += (1 - opt.beta2) * grad * grad
    c1 = 1 - opt.beta1**opt.step
    c2 = 1 - opt.beta2**opt.step
    params -= (opt.lr / c1) * opt.m / (np.sqrt(opt.v / c2) + opt.eps)


def adam_step(net: CopyNet, grads, opt: OptimizerState) -> tuple[CopyNet, OptimizerState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != net.params.shape or opt.m.shape != net.params.shape:
        raise ValueError("gradient / optimizer state shape mismatch")
    params = net.params.copy()
    new_opt = opt.copy()
    _adam_inplace(params, grads, new_opt)
    return net.with_params(params), new_opt


# -- capacity-controlled training ----------------------------------------------


@dataclass(frozen=True)
class EpsilonSchedule:
    """Shrinking risk bounds ``eps_k`` that stop each training stage early.

    The default update is ``eps_k = max(eps_{k-1} / 2, target)``; with
    ``literal_min=True`` it becomes ``min(eps_{k-1} / 2, target)``, which jumps
    straight to the target.
    """

    target: float = 1e-3
    initial: float = 1.0
    current: float | None = None
    literal_min: bool = False

    def __post_init__(self):
        if self.current is None:
            object.__setattr__(self, "current", self.initial)
        if not (self.target > 0 and self.initial > 0):
            raise ValueError("epsilon values must be positive")
        if self.current < self.target and not self.literal_min:
            raise ValueError("current epsilon bound is below the target")

    def tighten(self) -> "EpsilonSchedule":
        pick = min if self.literal_min else max
        return replace(self, current=pick(self.current / 2, self.target))

    def trace(self, steps: int) -> list[float]:
        out, sched = [], self
        for _ in range(steps):
            sched = sched.tighten()
            out.append(sched.current)
        return out


@dataclass(frozen=True)
class CapacityBudget:
    """Epoch allowance per stage; each stage that trains doubles it, up to ``cap`` total epochs."""

    allowance: int = 25
    growth: float = 2.0
    cap: int = 200

    def __post_init__(self):
        if self.allowance < 1 or self.growth <= 1 or self.cap < 1:
            raise ValueError("invalid capacity budget")
        if self.allowance > self.cap:
            object.__setattr__(self, "allowance", self.cap)

    def grow(self) -> "CapacityBudget":
        return replace(self, allowance=min(math.ceil(self.allowance * self.growth), self.cap))


@dataclass
class TrainDiagnostics:
    epochs: int = 0
    steps: int = 0
    initial_risk: float = float("nan")
    final_risk: float = float("nan")
    best_risk: float = float("nan")
    reached_target: bool = False
    stages: list[dict] = field(default_factory=list)
    best_risk_trace: list[float] = field(default_factory=list)
    opt: OptimizerState | None = None


def balanced_batches(labels: np.ndarray, n_classes: int, batch: int, rng: np.random.Generator):
    """Return ``draw(steps)`` producing a ``(steps, batch)`` index array.

    Every row takes an equal share of the batch from each class present in
    ``labels`` (remainder to the lowest classes), sampled with replacement.
    """
    groups = [np.flatnonzero(labels == c) for c in range(n_classes)]
    groups = [g for g in groups if len(g)]
    k = len(groups)
    counts = [batch // k + (1 if i < batch % k else 0) for i in range(k)]

    def draw(steps: int) -> np.ndarray:
        cols = [g[rng.integers(len(g), size=(steps, m))] for g, m in zip(groups, counts) if m]
        return np.ascontiguousarray(np.hstack(cols))

    return draw


def train_capacity_loop(
    net: CopyNet,
    sset,
    eps: EpsilonSchedule,
    budget: CapacityBudget,
    theta_prev: CopyNet | None = None,
    lam: float = 0.0,
    batch: int = 32,
    rng_seed=None,
    opt: OptimizerState | None = None,
    lr: float = 5e-4,
):
    """Minimize the memory-aware loss in stages of growing epoch allowance.

    Each stage trains until the empirical risk drops below the current bound
    ``eps_k`` or the stage allowance runs out; then the bound is tightened and
    the allowance enlarged. Training ends once the risk is below
    ``eps.target`` or ``budget.cap`` epochs have been spent. A stage whose
    bound is already met trains nothing and does not enlarge the allowance.

    Returns the lowest-risk parameters seen and a :class:`TrainDiagnostics`.
    The optimizer state (fresh unless ``opt`` is given) is updated in place
    and returned in the diagnostics.
    """
    _check_set(sset, net)
    if theta_prev is not None:
        _check_compatible(net, theta_prev)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if opt is None:
        opt = OptimizerState.fresh(net, lr=lr)

    x, y = sset.points, sset.onehot
    arch = net.arch
    prev = theta_prev.params if (theta_prev is not None and lam != 0) else None
    params = net.params.copy()

    def full_risk(p):
        probs = _forward_params(arch, p, x)
        return float(np.sum((probs - y) ** 2) / (arch.n_classes * len(x)))

    risk = full_risk(params)
    diag = TrainDiagnostics(initial_risk=risk, final_risk=risk, best_risk=risk, opt=opt)
    diag.best_risk_trace.append(risk)
    best = params.copy()
    if risk < eps.target:
        diag.reached_target = True
        return net.with_params(best), diag

    draw = balanced_batches(np.argmax(y, axis=1), arch.n_classes, batch, rng)
    steps_per_epoch = math.ceil(len(x) / batch)
    dims = np.array((arch.d, *arch.widths, arch.n_classes), dtype=np.int64)
    prev_arr = prev if prev is not None else params

    while risk >= eps.target and diag.epochs < budget.cap:
        if risk < eps.current:
            eps = eps.tighten()
            continue
        allowance = min(budget.allowance, budget.cap - diag.epochs)
        used = 0
        while used < allowance:
            opt.step = adam_steps(
                params, opt.m, opt.v, opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps,
                dims, x, y, draw(steps_per_epoch), prev_arr, float(lam) if prev is not None else 0.0,
            )
            used += 1
            diag.steps += steps_per_epoch
            risk = full_risk(params)
            if risk < diag.best_risk:
                diag.best_risk = risk
                best[:] = params
            diag.best_risk_trace.append(diag.best_risk)
            if risk < eps.current:
                break
        diag.epochs += used
        diag.stages.append({"eps_k": eps.current, "allowance": allowance, "epochs": used, "risk": risk})
        eps = eps.tighten()
        budget = budget.grow()

    diag.final_risk = diag.best_risk
    diag.reached_target = diag.best_risk < eps.target
    return net.with_params(best), diag
