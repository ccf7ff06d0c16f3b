"""Invariant suite run by ``moddual check``.

Each check returns a :class:`CheckResult` with the worst value observed and
the bound it was held to. The reference quantities here (path factors of the
modular norm, leafwise dual norms from the Jacobi SVD) are computed without
going through :func:`moddual.algebra.module_dualize`, so a wrong scaling in
the recursion shows up as a disagreement.
"""

from __future__ import annotations

import inspect
import time
from dataclasses import dataclass

import numpy as np

from . import algebra, atoms, polar
from .algebra import Atom, Composite, GradTree, Module, Tuple, WeightTree, module_norm, pairing
from .atoms import AtomKind
from .experiments import reference_cnn, reference_mlp
from .linalg import svd_oracle
from .optim import loss_and_grad

__all__ = [
    "CheckResult",
    "random_tree",
    "path_factors",
    "leaf_dual_norm",
    "reference_dual_norm",
    "random_unit_direction",
    "full_rank_grad",
    "run_all",
    "CHECKS",
]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    bound: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst={self.worst:.3e} bound={self.bound:.3e} {self.detail}".rstrip()


# -- random trees and reference quantities -----------------------------------


def random_tree(rng: np.random.Generator, n_leaves: int, d_in: int | None = None, tuple_out: bool = True) -> Module:
    """Random tree of Linear/Embed atoms, ReLU bonds, composites and tuples.

    Tuples only appear where nothing is composed after them.
    """
    d_in = d_in or int(rng.integers(2, 6))
    if n_leaves == 1:
        kind = "embed" if rng.random() < 0.25 else "linear"
        leaf = Atom(kind, (int(rng.integers(2, 6)), d_in), float(rng.uniform(0.5, 2.0)))
        return Composite(leaf, Atom("relu")) if rng.random() < 0.3 else leaf
    n1 = int(rng.integers(1, n_leaves))
    if tuple_out and rng.random() < 0.5:
        return Tuple(random_tree(rng, n1, d_in), random_tree(rng, n_leaves - n1, d_in))
    first = random_tree(rng, n1, d_in, tuple_out=False)
    return Composite(first, random_tree(rng, n_leaves - n1, first.out_shape[0], tuple_out))


def path_factors(m: Module) -> list[float]:
    """Per-leaf multipliers ``c_i`` with ``module_norm(w) = max_i c_i * ||w_i||``.

    A leaf under a zero-mass branch gets factor 0.
    """
    if isinstance(m, Atom):
        return [1.0]
    f1, f2 = path_factors(m.first), path_factors(m.second)
    a = m.mass / m.first.mass if m.first.mass > 0 else 0.0
    b = m.mass / m.second.mass if m.second.mass > 0 else 0.0
    if isinstance(m, Composite):
        a *= m.second.sensitivity
    return [a * f for f in f1] + [b * f for f in f2]


def leaf_dual_norm(spec, g) -> float:
    """Dual norm of one atom's gradient from closed forms and the Jacobi SVD."""
    kind = spec.kind
    if kind.is_bond:
        return 0.0
    if kind is AtomKind.EMBED:
        return float(np.sqrt(g.shape[0]) * np.linalg.norm(g, axis=0).sum())
    if kind is AtomKind.LINEAR:
        d_out, d_in = g.shape
        return float(np.sqrt(d_out / d_in) * svd_oracle(g).sigma.sum())
    d_out, d_in, k, _ = g.shape
    total = sum(svd_oracle(g[:, :, i, j]).sigma.sum() for i in range(k) for j in range(k))
    return float(np.sqrt(d_out / d_in) / (k * k) * total)


def reference_dual_norm(m: Module, g: GradTree) -> float:
    """Dual of a weighted max of norms is the weighted sum ``sum_i ||g_i||^dagger / c_i``."""
    total = 0.0
    for c, spec, leaf in zip(path_factors(m), m.atoms, g):
        d = leaf_dual_norm(spec, leaf)
        if d == 0.0:
            continue
        if c == 0.0:
            return float("inf")
        total += d / c
    return total


def random_unit_direction(m: Module, rng: np.random.Generator) -> WeightTree:
    """Random weight direction rescaled to unit modular norm.

    Half the draws use one random scale per leaf so that directions where a
    single leaf dominates the max are sampled too.
    """
    leaves = [rng.standard_normal(s) for s in m.weight_shapes()]
    if rng.random() < 0.5:
        leaves = [l * rng.uniform(0.0, 1.0) for l in leaves]
    t = WeightTree(leaves)
    return t / module_norm(m, t)


def full_rank_grad(m: Module, rng: np.random.Generator) -> GradTree:
    return GradTree([rng.standard_normal(s) for s in m.weight_shapes()])


# -- checks ------------------------------------------------------------------


def low_rank_matrix(rng: np.random.Generator, shape=(64, 64), rank: int = 10) -> np.ndarray:
    return rng.standard_normal((shape[0], rank)) @ rng.standard_normal((rank, shape[1]))


def polar_errors(g: np.ndarray) -> tuple[float, float]:
    """Newton-Schulz against the oracle: (range agreement, leak into the null spaces).

    For full-rank input the first number is ``||NS(G) - UV^T||_F`` and the
    second is zero. For rank-deficient input the comparison is restricted to
    the row/column-space projection, and the second number measures what the
    iteration put outside it.
    """
    x, _ = polar.orthogonalize(g)
    svd = svd_oracle(g)
    ref = svd.range_polar()
    u, v = svd.U[:, : svd.rank()], svd.V[:, : svd.rank()]
    inside = u @ (u.T @ x @ v) @ v.T
    return float(np.linalg.norm(inside - ref)), float(np.linalg.norm(x - inside))


def check_polar_oracle(seed: int = 0, per_shape: int = 10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = leak = 0.0
    for shape in [(16, 16), (64, 64), (128, 32), (32, 128), None]:
        for _ in range(per_shape):
            g = low_rank_matrix(rng) if shape is None else rng.standard_normal(shape)
            a, b = polar_errors(g)
            worst, leak = max(worst, a), max(leak, b)
    ok = worst <= 1e-5 and leak <= 1e-8
    return CheckResult("polar-oracle", ok, worst, 1e-5, f"||NS(G) - UV^T||_F, null-space leak {leak:.1e} (bound 1e-8)")


def check_basin() -> CheckResult:
    inside = polar.validate_coefficients(polar.CUBIC, np.sqrt(3.0) - 1e-6)
    outside = polar.validate_coefficients(polar.CUBIC, 2.0)
    ok = inside.valid and not outside.valid and outside.mode == "sign flip"
    return CheckResult("convergence-basin", ok, 0.0 if ok else 1.0, 0.0, "cubic valid below sqrt(3), invalid on (0, 2]")


def check_table1(seed: int = 0, trials: int = 10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d_out, d_in = (int(v) for v in rng.integers(2, 9, 2))
        s = svd_oracle(atoms.linear_dualize(rng.standard_normal((d_out, d_in)))).sigma
        worst = max(worst, float(np.abs(s - np.sqrt(d_out / d_in)).max()))
        k = int(rng.integers(1, 4))
        c = atoms.conv2d_dualize(rng.standard_normal((d_out, d_in, k, k)))
        for i in range(k):
            for j in range(k):
                s = svd_oracle(c[:, :, i, j]).sigma
                worst = max(worst, float(np.abs(s - np.sqrt(d_out / d_in) / k**2).max()))
        e = atoms.embed_dualize(rng.standard_normal((d_out, d_in)))
        worst = max(worst, float(np.abs(np.linalg.norm(e, axis=0) / np.sqrt(d_out) - 1).max()))
    return CheckResult("table1-scaling", worst <= 1e-5, worst, 1e-5, "singular values / column RMS")


def check_unit_ball(seed: int = 0, trials: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    lo, hi = 1.0, 0.0
    for _ in range(trials):
        m = random_tree(rng, int(rng.integers(1, 5)))
        n = module_norm(m, algebra.module_dualize(m, full_rank_grad(m, rng)))
        lo, hi = min(lo, n), max(hi, n)
    ok = lo >= 0.999 and hi <= 1.0 + 1e-12
    return CheckResult("unit-ball", ok, max(1.0 - lo, hi - 1.0), 1e-3, f"range [{lo:.12f}, {hi:.12f}]")


def check_dual_decomposition(seed: int = 0, trials: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        m = random_tree(rng, int(rng.integers(1, 5)))
        g = full_rank_grad(m, rng)
        got = pairing(g, algebra.module_dualize(m, g))
        ref = reference_dual_norm(m, g)
        worst = max(worst, abs(got - ref) / ref)
    return CheckResult("dual-norm-decomposition", worst <= 1e-6, worst, 1e-6, "relative error vs weighted-sum reference")


def check_pairing_bound(seed: int = 0, trees: int = 10, directions: int = 10_000) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(trees):
        m = random_tree(rng, int(rng.integers(1, 5)))
        g = full_rank_grad(m, rng)
        dual = pairing(g, algebra.module_dualize(m, g))
        for _ in range(directions):
            worst = max(worst, pairing(g, random_unit_direction(m, rng)) - dual)
    return CheckResult("pairing-bound", worst <= 1e-9, worst, 1e-9, "max <g,t> - dual_norm over unit t")


def prop1_instance(rng: np.random.Generator, candidates: int = 100_000):
    """One single-Linear-leaf instance; returns (closed-form value, best random value)."""
    d_out, d_in = (int(v) for v in rng.integers(1, 7, 2))
    lam = float(rng.uniform(0.1, 10.0))
    g = rng.standard_normal((d_out, d_in))
    m = Atom("linear", (d_out, d_in))
    direction = algebra.module_dualize(m, GradTree([g]))[0]
    dual = float(np.vdot(g, direction))
    opt = -(dual / lam) * direction
    scale = np.sqrt(d_in / d_out)

    def objective(dw):
        return np.einsum("ij,nij->n", g, dw) + 0.5 * lam * (scale * np.linalg.norm(dw, ord=2, axis=(1, 2))) ** 2

    half = candidates // 2
    d = rng.standard_normal((half, d_out, d_in))
    d /= (scale * np.linalg.norm(d, ord=2, axis=(1, 2)))[:, None, None]
    broad = d * rng.uniform(0, 2 * dual / lam, half)[:, None, None]
    # Perturbations are kept at least 1e-3 of the step length so that a win
    # reflects optimality rather than round-off in the last digits.
    noise = rng.standard_normal((candidates - half, d_out, d_in))
    noise /= np.linalg.norm(noise, axis=(1, 2))[:, None, None]
    near = opt + (dual / lam) * noise * rng.uniform(1e-3, 0.3, (candidates - half, 1, 1))
    cand = np.concatenate([broad, near])
    closed = float(objective(opt[None])[0])
    return closed, float(objective(cand).min())


def check_prop1(seed: int = 0, instances: int = 20, candidates: int = 100_000) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(instances):
        closed, best = prop1_instance(rng, candidates)
        worst = max(worst, closed - best)
    return CheckResult("prop1-optimality", worst <= 0.0, worst, 0.0, "closed-form minus best random objective")


def _relu_inputs(m: Module, cache) -> list:
    if isinstance(m, Atom):
        return [cache] if m.spec.kind is AtomKind.RELU else []
    return _relu_inputs(m.first, cache[0]) + _relu_inputs(m.second, cache[1])


def _relu_pattern(m: Module, w: WeightTree, x) -> np.ndarray:
    _, cache = m.forward_cached(w, x)
    parts = [np.ravel(c > 0) for c in _relu_inputs(m, cache)]
    return np.concatenate(parts) if parts else np.zeros(0, bool)


def gradient_check(m: Module, data, loss: str, seed: int, h: float = 1e-4) -> float:
    """Relative 2-norm error between backprop and central differences of the loss.

    A coordinate whose stencil ``w +- h e_i`` switches some ReLU on or off
    straddles a kink, where the central difference does not estimate the
    derivative; its step is divided by 100 until the pattern is stable.
    """
    rng = np.random.default_rng(seed)
    w = m.init(rng)
    x, t = data
    _, g = loss_and_grad(m, w, x, t, loss)
    flat = w.flatten()
    sizes = [l.size for l in w]

    def unflatten(v):
        out, i = [], 0
        for leaf, n in zip(w, sizes):
            out.append(v[i : i + n].reshape(leaf.shape))
            i += n
        return WeightTree(out)

    base = _relu_pattern(m, w, x)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        step = h
        for _ in range(4):
            e = np.zeros_like(flat)
            e[i] = step
            wp, wm = unflatten(flat + e), unflatten(flat - e)
            if np.array_equal(_relu_pattern(m, wp, x), base) and np.array_equal(_relu_pattern(m, wm, x), base):
                break
            step /= 100
        lp, _ = loss_and_grad(m, wp, x, t, loss)
        lm, _ = loss_and_grad(m, wm, x, t, loss)
        fd[i] = (lp - lm) / (2 * step)
    ref = g.flatten()
    return float(np.linalg.norm(fd - ref) / np.linalg.norm(ref))


def gradient_check_setups(seed: int):
    rng = np.random.default_rng(1000 + seed)
    mlp = reference_mlp(d_in=4, width=8, d_out=2)
    mlp_data = (rng.standard_normal((16, 4)), rng.standard_normal((16, 2)))
    cnn = reference_cnn(image=(6, 6), channels=2, width=3, d_out=3)
    cnn_data = (rng.standard_normal((8, 6, 6, 2)), rng.integers(0, 3, 8))
    return [("mlp", mlp, mlp_data, "mse"), ("cnn", cnn, cnn_data, "cross_entropy")]


def check_gradients(seeds: int = 5) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        for _, m, data, loss in gradient_check_setups(seed):
            worst = max(worst, gradient_check(m, data, loss, seed))
    return CheckResult("gradient-check", worst <= 1e-5, worst, 1e-5, "relative error vs central differences")


def probe_targets():
    return [
        ("linear", Atom("linear", (5, 3)), None),
        ("embed", Atom("embed", (4, 6)), None),
        ("conv2d", Atom("conv2d", (3, 2, 3), 1.0, (5, 5)), None),
        ("relu", Atom("relu"), (7,)),
        ("flatten", Atom("flatten"), (3, 3, 2)),
        ("mlp", reference_mlp(), None),
        ("cnn", reference_cnn(), None),
    ]


def check_well_normed(seed: int = 0, trials: int = 1000) -> CheckResult:
    worst, which = 0.0, ""
    for name, m, shape in probe_targets():
        report = algebra.well_normed_probe(m, trials, seed, shape)
        if report.max_ratio > worst:
            worst, which = report.max_ratio, name
    return CheckResult("well-normed", worst <= 1 + 1e-3, worst, 1 + 1e-3, f"largest ratio ({which})")


CHECKS = {
    "polar-oracle": check_polar_oracle,
    "convergence-basin": check_basin,
    "table1-scaling": check_table1,
    "unit-ball": check_unit_ball,
    "dual-norm-decomposition": check_dual_decomposition,
    "pairing-bound": check_pairing_bound,
    "prop1-optimality": check_prop1,
    "gradient-check": check_gradients,
    "well-normed": check_well_normed,
}


def run_all(seed: int = 0, echo=None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            res = fn(seed=seed) if "seed" in inspect.signature(fn).parameters else fn()
        except Exception as exc:  # a crash is a failed property, not an aborted suite
            res = CheckResult(name, False, float("nan"), float("nan"), f"{type(exc).__name__}: {exc}")
        results.append(res)
        if echo is not None:
            echo(f"{res.line()} ({time.perf_counter() - t0:.1f}s)")
    return results
