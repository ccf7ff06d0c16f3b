"""Polar-factor kernels: odd-polynomial Newton-Schulz iterations and an
inverse-square-root route.

Both routes approximate ``U @ V.T`` for ``G = U @ diag(s) @ V.T``. The
Newton-Schulz family applies an odd polynomial ``g`` to every singular value
at each step, so it only needs matrix products and is safe on rank-deficient
input. The inverse-root route needs a well-conditioned Gram matrix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import as_matrix, spectral_norm, unit_scaled

__all__ = [
    "Normalization",
    "IterationSchedule",
    "ConvergenceReport",
    "CoefficientReport",
    "NonConvergence",
    "IllConditioned",
    "InvalidSchedule",
    "CUBIC",
    "DEFAULT_SCHEDULE",
    "SPECTRAL_SAFETY",
    "DEFAULT_X_MAX",
    "ns_step",
    "odd_polynomial",
    "validate_coefficients",
    "orthogonalize",
    "inverse_root_dualize",
]

CUBIC = (1.5, -0.5)
# Power iteration underestimates sigma_max; dividing by a slightly larger
# number keeps every normalized singular value below sqrt(3).
SPECTRAL_SAFETY = 1.01

# Right edge of the interval the validator checks; the cubic's basin is (0, sqrt 3).
DEFAULT_X_MAX = float(np.sqrt(3.0) - 1e-6)


class Normalization(str, enum.Enum):
    SPECTRAL_ESTIMATE = "spectral_estimate"
    FROBENIUS = "frobenius"


class NonConvergence(RuntimeError):
    """Raised when an iteration exhausts its step budget.

    The best iterate and the report travel with the exception so callers can
    still inspect or use them.
    """

    def __init__(self, message: str, result: np.ndarray, report: "ConvergenceReport"):
        super().__init__(message)
        self.result = result
        self.report = report


class IllConditioned(ValueError):
    def __init__(self, condition: float):
        super().__init__(f"Gram matrix condition estimate {condition:.3e} exceeds 1e8")
        self.condition = condition


class InvalidSchedule(ValueError):
    def __init__(self, report: "CoefficientReport"):
        super().__init__(
            f"coefficients {report.coeffs} rejected: {report.mode} at x={report.point!r}"
        )
        self.report = report


@dataclass(frozen=True)
class CoefficientReport:
    coeffs: tuple
    x_max: float
    valid: bool
    mode: str | None = None  # "sign flip", "overshoot", "fixed point", "non-convergence"
    point: float | None = None

    def __bool__(self) -> bool:
        return self.valid


@dataclass(frozen=True)
class IterationSchedule:
    """Coefficients and stopping rule for a Newton-Schulz run.

    ``coefficients`` is either one tuple ``(a, b, c, ...)`` reused at every
    step, or a sequence of such tuples, one per step; the last tuple repeats
    if ``max_steps`` exceeds the sequence length. Iteration stops once the
    per-step change ``||X_{t+1} - X_t||_F / sqrt(r)`` falls below
    ``tolerance``, with ``r`` the short dimension.
    """

    coefficients: tuple = CUBIC
    # Small singular values grow by at most 3/2 per cubic step, and square
    # Gaussian inputs reach sigma_min / ||G||_F ~ 1e-6, which needs ~40 steps.
    max_steps: int = 60
    normalization: Normalization = Normalization.FROBENIUS
    tolerance: float = 1e-6
    x_max: float = DEFAULT_X_MAX

    def __post_init__(self):
        coeffs = self.coefficients
        if len(coeffs) == 0:
            raise ValueError("empty coefficient list")
        if all(isinstance(c, (int, float)) for c in coeffs):
            coeffs = (tuple(float(c) for c in coeffs),)
        else:
            coeffs = tuple(tuple(float(c) for c in step) for step in coeffs)
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "normalization", Normalization(self.normalization))
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not self.x_max > 0:
            raise ValueError("x_max must be positive")

    @property
    def per_step(self) -> bool:
        return len(self.coefficients) > 1

    def coeffs_at(self, step: int) -> tuple:
        return self.coefficients[min(step, len(self.coefficients) - 1)]

    def validate(self) -> "IterationSchedule":
        """Raise :class:`InvalidSchedule` if any tuple fails the basin check."""
        for coeffs in self.coefficients:
            report = validate_coefficients(coeffs, self.x_max)
            if not report.valid:
                raise InvalidSchedule(report)
        return self

    def to_dict(self) -> dict:
        coeffs = [list(c) for c in self.coefficients]
        d = {
            "coefficients": coeffs[0] if len(coeffs) == 1 else coeffs,
            "max_steps": self.max_steps,
            "normalization": self.normalization.value,
            "tolerance": self.tolerance,
        }
        if self.x_max != DEFAULT_X_MAX:
            d["x_max"] = self.x_max
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IterationSchedule":
        unknown = set(d) - {"coefficients", "max_steps", "normalization", "tolerance", "x_max"}
        if unknown:
            raise ValueError(f"unknown schedule fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "coefficients" in kwargs:
            c = kwargs["coefficients"]
            kwargs["coefficients"] = tuple(tuple(x) if isinstance(x, list) else x for x in c)
        return cls(**kwargs)


DEFAULT_SCHEDULE = IterationSchedule()


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    steps: int
    residual: float  # ||X^T X - I||_F on the smaller Gram matrix
    last_change: float
    scale: float  # X_0 = G / scale


def odd_polynomial(coeffs: Sequence[float], x):
    """Evaluate ``a*x + b*x**3 + c*x**5 + ...``."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    acc = np.zeros_like(x)
    for c in reversed(coeffs):
        acc = acc * x2 + c
    return acc * x


def ns_step(x, coeffs: Sequence[float]) -> np.ndarray:
    """One odd-polynomial step ``sum_k c_k (X X^T)^k X``.

    The polynomial in the Gram matrix is evaluated by Horner's rule on
    whichever Gram side is smaller.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(coeffs) == 0:
        raise ValueError("empty coefficient tuple")
    wide = x.shape[0] <= x.shape[1]
    gram = x @ x.T if wide else x.T @ x
    eye = np.eye(gram.shape[0])
    poly = coeffs[-1] * eye
    for c in reversed(coeffs[:-1]):
        poly = poly @ gram + c * eye
    return poly @ x if wide else x @ poly


def validate_coefficients(coeffs: Sequence[float], x_max: float, n_grid: int = 10_000) -> CoefficientReport:
    """Check that ``g`` drives every point of ``(0, x_max]`` to 1.

    Requirements, checked in this order on a uniform grid of ``n_grid`` points:
    ``g`` maps the interval into itself (no sign flip, no overshoot), ``g(1)``
    equals 1 to 1e-12, and 100 applications of ``g`` bring each grid point
    within 1e-6 of 1. Iterated values must also stay inside the interval.
    """
    coeffs = tuple(float(c) for c in coeffs)
    if not coeffs:
        raise ValueError("empty coefficient tuple")
    if not x_max > 0:
        raise ValueError("x_max must be positive")

    def reject(mode, point):
        return CoefficientReport(coeffs, x_max, False, mode, float(point))

    grid = np.linspace(x_max / n_grid, x_max, n_grid)
    y = odd_polynomial(coeffs, grid)
    bad = y <= 0
    if bad.any():
        return reject("sign flip", grid[np.argmax(bad)])
    bad = y > x_max
    if bad.any():
        return reject("overshoot", grid[np.argmax(bad)])
    if abs(float(odd_polynomial(coeffs, 1.0)) - 1.0) > 1e-12:
        return reject("fixed point", 1.0)
    x = y
    for _ in range(99):
        if np.all(np.abs(x - 1.0) < 1e-6):
            break
        x = odd_polynomial(coeffs, x)
        out = (x <= 0) | (x > x_max)
        if out.any():
            return reject("sign flip" if x[np.argmax(out)] <= 0 else "overshoot", grid[np.argmax(out)])
    bad = np.abs(x - 1.0) >= 1e-6
    if bad.any():
        return reject("non-convergence", grid[np.argmax(bad)])
    return CoefficientReport(coeffs, x_max, True)


def _gram_residual(x: np.ndarray) -> float:
    gram = x @ x.T if x.shape[0] <= x.shape[1] else x.T @ x
    return float(np.linalg.norm(gram - np.eye(gram.shape[0])))


def orthogonalize(g, schedule: IterationSchedule = DEFAULT_SCHEDULE, strict: bool = True):
    """Approximate the polar factor ``U @ V.T`` by Newton-Schulz iteration.

    Returns ``(X, report)``. A zero matrix maps to zero. If the input is
    already a scaled semi-orthogonal matrix the rescaled input is returned
    with ``report.steps == 0``.

    Raises
    ------
    NonConvergence
        When ``schedule.max_steps`` steps leave the per-step change above
        tolerance and ``strict`` is true. The exception carries the last
        iterate and report; with ``strict=False`` they are returned instead.
    """
    g = as_matrix(g, "g")
    r = min(g.shape)
    if not np.any(g):
        return np.zeros_like(g), ConvergenceReport(True, 0, _gram_residual(g), 0.0, 0.0)
    unit, e = unit_scaled(g)
    fro = float(np.linalg.norm(unit))

    # Already polar up to scale: all singular values equal ||G||_F / sqrt(r).
    y = unit / (fro / np.sqrt(r))
    residual = _gram_residual(y)
    if residual / np.sqrt(r) <= schedule.tolerance:
        return y, ConvergenceReport(True, 0, residual, 0.0, float(np.ldexp(fro / np.sqrt(r), e)))

    if schedule.normalization is Normalization.FROBENIUS:
        unit_scale = fro
    else:
        unit_scale = SPECTRAL_SAFETY * spectral_norm(unit)
    scale = float(np.ldexp(unit_scale, e))
    x = unit / unit_scale
    change = np.inf
    for step in range(schedule.max_steps):
        x_new = ns_step(x, schedule.coeffs_at(step))
        change = float(np.linalg.norm(x_new - x) / np.sqrt(r))
        x = x_new
        if change <= schedule.tolerance:
            return x, ConvergenceReport(True, step + 1, _gram_residual(x), change, scale)
    report = ConvergenceReport(False, schedule.max_steps, _gram_residual(x), change, scale)
    if strict:
        raise NonConvergence(
            f"Newton-Schulz change {change:.3e} above tolerance {schedule.tolerance:.1e} "
            f"after {schedule.max_steps} steps",
            x,
            report,
        )
    return x, report


def inverse_root_dualize(g, max_steps: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Polar factor via ``(G G^T)^{-1/2} G`` on the smaller Gram side.

    The inverse square root comes from the coupled Newton-Schulz iteration

        Y_{k+1} = Y_k T_k / 2,  Z_{k+1} = T_k Z_k / 2,  T_k = 3I - Z_k Y_k,

    started at ``Y_0 = A / trace(A)``, ``Z_0 = I``, so that ``Z_k`` tends to
    ``(A / trace(A))^{-1/2}``. The iteration stops when
    ``||Z_k Y_k - I||_F <= tol``, or once that residual is below 1e-6 and
    has stopped decreasing (round-off floor).

    Raises
    ------
    IllConditioned
        If the Gram matrix has condition number above 1e8.
    NonConvergence
        If ``max_steps`` iterations do not reach ``tol``.
    """
    g = as_matrix(g, "g")
    if not np.any(g):
        return np.zeros_like(g)
    g, _ = unit_scaled(g)  # the polar factor does not depend on scale
    wide = g.shape[0] <= g.shape[1]
    a = g @ g.T if wide else g.T @ g
    eig = np.linalg.eigvalsh(a)
    cond = np.inf if eig[0] <= 0 else eig[-1] / eig[0]
    if cond > 1e8:
        raise IllConditioned(float(cond))

    n = a.shape[0]
    eye = np.eye(n)
    c = float(np.trace(a))
    y, z = a / c, eye.copy()
    err = np.inf
    for step in range(max_steps):
        t = 3.0 * eye - z @ y
        y, z = 0.5 * y @ t, 0.5 * t @ z
        prev, err = err, float(np.linalg.norm(z @ y - eye))
        if err <= tol or (err < 1e-6 and err >= prev):
            break
    else:
        inv_root = z / np.sqrt(c)
        result = inv_root @ g if wide else g @ inv_root
        report = ConvergenceReport(False, max_steps, _gram_residual(result), err, c)
        raise NonConvergence(f"inverse-root iteration residual {err:.3e} after {max_steps} steps", result, report)
    inv_root = z / np.sqrt(c)
    return inv_root @ g if wide else g @ inv_root
