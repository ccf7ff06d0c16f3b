"""Dense linear-algebra core.

Matrices are plain float64 ``numpy.ndarray`` objects with ``ndim == 2``.
No function here mutates its arguments; every result is a fresh array.

The module provides the vector and induced operator norms used by the
atomic modules, a power-iteration spectral-norm estimate, an exact one-sided
Jacobi SVD used as a ground-truth oracle, and the plain-text matrix fixture
format::

    rows cols
    a11 a12 ... a1c
    ...
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MatrixFormatError",
    "SvdResult",
    "SvdNonConvergence",
    "as_matrix",
    "as_tensor4",
    "matmul",
    "rms_norm",
    "l1_norm",
    "svd_oracle",
    "unit_scaled",
    "spectral_norm",
    "op_norm_rms_rms",
    "op_norm_l1_rms",
    "read_matrix",
    "write_matrix",
    "format_matrix",
    "parse_matrix",
]


class MatrixFormatError(ValueError):
    """Malformed matrix fixture; ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class SvdNonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class SvdResult:
    """Reduced SVD ``a = U @ diag(sigma) @ V.T`` with ``r = min(rows, cols)``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T

    def polar(self) -> np.ndarray:
        return self.U @ self.V.T

    def range_polar(self) -> np.ndarray:
        """``U_r @ V_r.T`` over the numerically nonzero singular values only.

        This is the minimum-norm polar factor: it maps the null space to zero,
        which is what Newton-Schulz produces on rank-deficient input.
        """
        r = self.rank()
        return self.U[:, :r] @ self.V[:, :r].T

    def rank(self) -> int:
        """Count of singular values above ``max(m, n) * eps * sigma_max``."""
        if self.sigma.size == 0 or self.sigma[0] == 0:
            return 0
        cutoff = max(self.U.shape[0], self.V.shape[0]) * np.finfo(float).eps * self.sigma[0]
        return int(np.count_nonzero(self.sigma > cutoff))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def as_tensor4(a, name: str = "tensor") -> np.ndarray:
    """Validate a ``(d_out, d_in, k, k)`` convolution kernel."""
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 4 or min(a.shape) < 1:
        raise ValueError(f"{name} must be a non-empty 4-D array, got shape {a.shape}")
    if a.shape[2] != a.shape[3]:
        raise ValueError(f"{name} must have a square kernel, got {a.shape[2]}x{a.shape[3]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects two 2-D arrays")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def rms_norm(v) -> float:
    """Euclidean norm divided by the square root of the dimension."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("rms_norm of an empty vector")
    v, e = unit_scaled(v)
    return float(np.ldexp(np.linalg.norm(v), e) / np.sqrt(v.size))


def l1_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("l1_norm of an empty vector")
    return float(np.abs(v).sum())


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: n-1 rounds of n/2 disjoint pairs covering every pair once.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        top, bot = players[: m // 2], players[m // 2 :][::-1]
        pairs = [(min(p, q), max(p, q)) for p, q in zip(top, bot) if p < n and q < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _orthonormal_complement(basis: np.ndarray, m: int, count: int) -> np.ndarray:
    """``count`` unit vectors in R^m orthogonal to the columns of ``basis``."""
    found = [basis[:, j] for j in range(basis.shape[1])]
    extra = []
    for i in range(m):
        if len(extra) == count:
            break
        v = np.zeros(m)
        v[i] = 1.0
        for _ in range(2):  # re-orthogonalize once for stability
            for u in found + extra:
                v = v - (u @ v) * u
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            extra.append(v / nv)
    return np.column_stack(extra) if extra else np.zeros((m, 0))


def unit_scaled(a) -> tuple[np.ndarray, int]:
    """``(a * 2**-e, e)`` with the largest entry in [0.5, 1); ``e = 0`` for zero input.

    The largest squares of the rescaled array neither underflow nor overflow.
    The power-of-two factor makes the round trip exact, except for entries so
    far below the peak that they become subnormal, which are negligible there.
    """
    a = np.asarray(a, dtype=np.float64)
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    if not (peak > 0 and np.isfinite(peak)):
        return a, 0
    e = int(np.frexp(peak)[1])
    return np.ldexp(a, -e), e


def svd_oracle(g, max_sweeps: int = 60) -> SvdResult:
    """Reduced SVD by one-sided (Hestenes) Jacobi rotations.

    Columns are orthogonalized in round-robin order so that each round
    rotates n/2 disjoint column pairs at once. Sweeps continue until no pair
    has a relative inner product above machine precision. Left singular
    vectors for numerically zero singular values are completed to an
    orthonormal set, so ``U.T @ U = I`` holds for rank-deficient input too.

    Raises
    ------
    SvdNonConvergence
        If ``max_sweeps`` sweeps do not reach the rotation threshold.
    """
    g = as_matrix(g, "g")
    transposed = g.shape[0] < g.shape[1]
    a = g.T.copy() if transposed else g.copy()
    a, exponent = unit_scaled(a)
    m, n = a.shape
    v = np.eye(n)
    eps = np.finfo(np.float64).eps
    floor = (eps * np.linalg.norm(a)) ** 2
    schedule = _round_robin(n)

    for _ in range(max_sweeps):
        rotated = False
        for p, q in schedule:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            active = (np.abs(gamma) > n * eps * scale) & (scale > floor)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise SvdNonConvergence(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    cutoff = max(m, n) * eps * (sigma[0] if sigma.size else 0.0)
    nonzero = sigma > cutoff
    u = np.zeros((m, n))
    u[:, nonzero] = a[:, nonzero] / sigma[nonzero]
    if not nonzero.all():
        u[:, ~nonzero] = _orthonormal_complement(u[:, nonzero], m, int((~nonzero).sum()))
    sigma = np.ldexp(sigma, exponent)
    if transposed:
        return SvdResult(U=v, sigma=sigma, V=u)
    return SvdResult(U=u, sigma=sigma, V=v)


def spectral_norm(g, tol: float = 1e-12, max_iters: int = 1000, seed: int = 0) -> float:
    """Power-iteration estimate of the largest singular value.

    The estimate is a Rayleigh quotient ``||G v|| / ||v||`` and therefore never
    exceeds the true value. Two starts are run, the normalized all-ones vector
    and one fixed-seed Gaussian vector, and the larger estimate is returned.
    """
    g = as_matrix(g, "g")
    if not np.any(g):
        return 0.0
    g, exponent = unit_scaled(g)
    gram = g.T @ g
    n = g.shape[1]
    starts = [np.ones(n), np.random.default_rng(seed).standard_normal(n)]
    best = 0.0
    for v in starts:
        v = v / np.linalg.norm(v)
        est = 0.0
        for _ in range(max_iters):
            w = gram @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            v = w / nw
            new = float(np.linalg.norm(g @ v))
            if abs(new - est) <= tol * new:
                est = new
                break
            est = new
        best = max(best, est)
    return float(np.ldexp(best, exponent))


def op_norm_rms_rms(w) -> float:
    """Induced RMS->RMS norm: ``sqrt(d_in / d_out) * sigma_max(w)``."""
    w = as_matrix(w, "w")
    d_out, d_in = w.shape
    w, e = unit_scaled(w)
    return float(np.sqrt(d_in / d_out) * np.ldexp(np.linalg.norm(w, 2), e))


def op_norm_l1_rms(w) -> float:
    """Induced l1->RMS norm: the largest column RMS norm."""
    w, e = unit_scaled(as_matrix(w, "w"))
    return float(np.ldexp(np.max(np.linalg.norm(w, axis=0)), e) / np.sqrt(w.shape[0]))


def format_matrix(a) -> str:
    a = as_matrix(a)
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in a]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise MatrixFormatError("missing 'rows cols' header", 1)
    header = lines[0].split()
    try:
        rows, cols = (int(x) for x in header)
    except ValueError:
        raise MatrixFormatError(f"bad header {lines[0]!r}, expected 'rows cols'", 1) from None
    if rows < 1 or cols < 1:
        raise MatrixFormatError("rows and cols must be positive", 1)
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != rows:
        raise MatrixFormatError(f"expected {rows} rows, found {len(body)}", len(body) + 2 if len(body) < rows else rows + 2)
    out = np.empty((rows, cols))
    for i, line in enumerate(body):
        fields = line.split()
        if len(fields) != cols:
            raise MatrixFormatError(f"expected {cols} values, found {len(fields)}", i + 2)
        try:
            out[i] = [float(x) for x in fields]
        except ValueError as exc:
            raise MatrixFormatError(str(exc), i + 2) from None
        if not np.all(np.isfinite(out[i])):
            raise MatrixFormatError("non-finite value", i + 2)
    return out


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return parse_matrix(fh.read())


def write_matrix(path: str | os.PathLike | io.TextIOBase, a) -> None:
    text = format_matrix(a)
    if hasattr(path, "write"):
        path.write(text)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
