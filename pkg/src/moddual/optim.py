"""Dualized steepest descent.

The gradient of the loss is a :class:`GradTree`. An update is formed by
sending it through :func:`module_dualize` and then either taking a fixed
step ``eta`` in the resulting unit-norm direction, or the sharpness-scaled
step ``dual_norm(g) / sharpness`` that minimizes the linear term plus a
quadratic norm penalty.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .algebra import GradTree, Module, WeightTree, module_dualize, module_norm, pairing
from .atoms import atom_norm
from .polar import DEFAULT_SCHEDULE, IterationSchedule

__all__ = [
    "FixedStep",
    "SharpnessScaled",
    "UpdateRule",
    "TrainingDiverged",
    "dual_norm",
    "steepest_step",
    "mse_loss",
    "cross_entropy_loss",
    "LOSSES",
    "loss_and_grad",
    "train",
    "METRICS_SCHEMA_VERSION",
]

METRICS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FixedStep:
    """``w - eta * dualize(g)``."""

    eta: float
    schedule: IterationSchedule = field(default=DEFAULT_SCHEDULE)

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")


@dataclass(frozen=True)
class SharpnessScaled:
    """``w - (dual_norm(g) / sharpness) * dualize(g)``.

    ``sharpness`` must be strictly positive: at zero the minimizer of the
    penalized model is unbounded.
    """

    sharpness: float
    schedule: IterationSchedule = field(default=DEFAULT_SCHEDULE)

    def __post_init__(self):
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")


UpdateRule = FixedStep | SharpnessScaled


class TrainingDiverged(RuntimeError):
    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics


def dual_norm(m: Module, g: GradTree, schedule: IterationSchedule = DEFAULT_SCHEDULE) -> float:
    """Dual modular norm, evaluated as ``<g, module_dualize(m, g)>``."""
    return pairing(g, module_dualize(m, g, schedule))


def _dualized_step(m, w, g, rule):
    direction = module_dualize(m, g, rule.schedule)
    dual = pairing(g, direction)
    step = rule.eta if isinstance(rule, FixedStep) else dual / rule.sharpness
    return w - step * direction, step * direction, dual


def steepest_step(m: Module, w: WeightTree, g: GradTree, rule: UpdateRule) -> WeightTree:
    return _dualized_step(m, w, g, rule)[0]


# -- losses ------------------------------------------------------------------


def mse_loss(y, t):
    """Mean over the batch of ``0.5 * ||y - t||^2``; returns ``(loss, dloss/dy)``."""
    y = np.asarray(y)
    r = y - np.asarray(t).reshape(y.shape)
    n = y.shape[0]
    return 0.5 * float(np.sum(r * r)) / n, r / n


def cross_entropy_loss(y, t):
    """Softmax cross-entropy with integer labels ``t``, averaged over the batch."""
    y = np.asarray(y)
    t = np.asarray(t, dtype=np.int64)
    z = y - y.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    loss = -float(logp[np.arange(n), t].sum()) / n
    grad = np.exp(logp)
    grad[np.arange(n), t] -= 1.0
    return loss, grad / n


LOSSES = {"mse": mse_loss, "cross_entropy": cross_entropy_loss}


def loss_and_grad(m: Module, w: WeightTree, x, t, loss="mse"):
    """Loss value and its :class:`GradTree` by reverse-mode through the tree."""
    fn = LOSSES[loss] if isinstance(loss, str) else loss
    y, cache = m.forward_cached(w, x)
    value, dy = fn(y, t)
    g, _ = m.backward(w, cache, dy)
    return value, g


def _finite(x: float) -> float | None:
    return x if math.isfinite(x) else None


def train(
    m: Module,
    data,
    rule: UpdateRule,
    steps: int,
    seed: int = 0,
    loss: str = "mse",
    init: WeightTree | None = None,
    divergence: float = 1e6,
    sink=None,
):
    """Full-batch dualized descent on ``data = (inputs, targets)``.

    Returns ``(weights, metrics)``; ``metrics`` has one record per step plus
    the initial record at step 0, each holding the loss before the update,
    the dual norm of the gradient and the atom norm of every leaf's update.
    ``sink``, if given, receives each record as one JSON line as it is made.

    Raises
    ------
    TrainingDiverged
        If the loss exceeds ``divergence`` or stops being finite; the partial
        metrics are attached.
    """
    x, t = data
    rng = np.random.default_rng(seed)
    w = init if init is not None else m.init(rng)
    metrics = []

    def emit(record):
        metrics.append(record)
        if sink is not None:
            sink.write(json.dumps(record, sort_keys=True) + "\n")

    for step in range(steps + 1):
        value, g = loss_and_grad(m, w, x, t, loss)
        record = {"schema_version": METRICS_SCHEMA_VERSION, "step": step, "loss": _finite(value)}
        if not math.isfinite(value) or value > divergence:
            emit(record)
            raise TrainingDiverged(f"loss {value!r} at step {step}", metrics)
        if step == steps:
            emit(record)
            break
        new_w, delta, dual = _dualized_step(m, w, g, rule)
        record["dual_norm"] = dual
        record["update_norms"] = [atom_norm(a, d) for a, d in zip(m.atoms, delta)]
        record["update_module_norm"] = module_norm(m, delta)
        emit(record)
        w = new_w
    return w, metrics
