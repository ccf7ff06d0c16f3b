"""Module trees and the modular norm / duality-map recursion.

A tree is built from :class:`Atom` leaves with two binary combinators:

* ``Composite(first, second)`` runs ``first`` then ``second`` (the math
  notation is ``second o first``). Masses add, sensitivities multiply.
* ``Tuple(first, second)`` feeds one input to both children and returns the
  pair of outputs. Masses add, sensitivities add.

Weights and gradients are carried as :class:`WeightTree` and
:class:`GradTree`, flat tuples of arrays in leaf order. A gradient is a dual
vector: it can be paired with weights but never added to them. The only way
back to weight space is :func:`module_dualize`.
"""

from __future__ import annotations

import numpy as np

from .atoms import (
    EMPTY,
    AtomKind,
    AtomSpec,
    atom_backward,
    atom_dualize,
    atom_forward,
    atom_jvp,
    atom_norm,
    init_weight,
    spatial_max_rms,
)
from .linalg import l1_norm, rms_norm
from .polar import DEFAULT_SCHEDULE, IterationSchedule

__all__ = [
    "Module",
    "Atom",
    "Composite",
    "Tuple",
    "chain",
    "WeightTree",
    "GradTree",
    "ZeroMassWithGradient",
    "ShapeMismatch",
    "module_norm",
    "module_dualize",
    "pairing",
    "apply_update",
    "composite_norm_factors",
    "tuple_norm_factors",
    "composite_dual_scales",
    "tuple_dual_scales",
    "well_normed_probe",
    "ProbeReport",
    "activation_norm",
    "from_dict",
]


class ZeroMassWithGradient(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


# -- weight and gradient trees -----------------------------------------------


class _LeafTree:
    __slots__ = ("leaves",)

    def __init__(self, leaves):
        self.leaves = tuple(np.array(l, dtype=np.float64) for l in leaves)
        for leaf in self.leaves:
            leaf.flags.writeable = False

    def __len__(self):
        return len(self.leaves)

    def __iter__(self):
        return iter(self.leaves)

    def __getitem__(self, i):
        return self.leaves[i]

    def __repr__(self):
        shapes = ", ".join(str(l.shape) for l in self.leaves)
        return f"{type(self).__name__}({shapes})"

    def flatten(self) -> np.ndarray:
        return np.concatenate([l.ravel() for l in self.leaves]) if self.leaves else EMPTY

    def _check(self, other):
        if len(self) != len(other) or any(a.shape != b.shape for a, b in zip(self, other)):
            raise ShapeMismatch("trees are not congruent")

    def __mul__(self, c):
        if not np.isscalar(c):
            return NotImplemented
        return type(self)([c * l for l in self.leaves])

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / c)

    def __neg__(self):
        return self * -1.0

    def allclose(self, other, **kw) -> bool:
        self._check(other)
        return all(np.allclose(a, b, **kw) for a, b in zip(self, other))


class WeightTree(_LeafTree):
    """Primal vector: weights or weight-space directions."""

    def __add__(self, other):
        if isinstance(other, GradTree):
            raise TypeError("cannot add a dual vector (GradTree) to weights; dualize it first")
        if not isinstance(other, WeightTree):
            return NotImplemented
        self._check(other)
        return WeightTree([a + b for a, b in zip(self, other)])

    def __sub__(self, other):
        if isinstance(other, GradTree):
            raise TypeError("cannot subtract a dual vector (GradTree) from weights; dualize it first")
        if not isinstance(other, WeightTree):
            return NotImplemented
        self._check(other)
        return WeightTree([a - b for a, b in zip(self, other)])

    __radd__ = __add__

    def __rsub__(self, other):
        if isinstance(other, GradTree):
            raise TypeError("cannot combine a GradTree with weights additively")
        return NotImplemented


class GradTree(_LeafTree):
    """Dual vector: a gradient with respect to a :class:`WeightTree`."""

    def __add__(self, other):
        if isinstance(other, WeightTree):
            raise TypeError("cannot add weights to a dual vector (GradTree)")
        if not isinstance(other, GradTree):
            return NotImplemented
        self._check(other)
        return GradTree([a + b for a, b in zip(self, other)])

    def __sub__(self, other):
        if isinstance(other, WeightTree):
            raise TypeError("cannot subtract weights from a dual vector (GradTree)")
        if not isinstance(other, GradTree):
            return NotImplemented
        self._check(other)
        return GradTree([a - b for a, b in zip(self, other)])


def pairing(g: GradTree, w: WeightTree) -> float:
    """Dual pairing ``<g, w>``: the flattened inner product."""
    if not isinstance(g, GradTree) or not isinstance(w, WeightTree):
        raise TypeError("pairing takes (GradTree, WeightTree)")
    g._check(w)
    return float(sum(np.vdot(a, b) for a, b in zip(g, w)))


def apply_update(w: WeightTree, direction: WeightTree, lr: float) -> WeightTree:
    """``w - lr * direction`` for a primal (already dualized) direction."""
    if not isinstance(direction, WeightTree):
        raise TypeError("update direction must be a WeightTree; pass gradients through module_dualize")
    return w - lr * direction


# -- scale factors -----------------------------------------------------------
#
# Kept as module-level functions so that each factor is defined in one place.


def _ratio(num: float, den: float) -> float:
    return 0.0 if den == 0 else num / den


def composite_norm_factors(m: "Composite") -> tuple[float, float]:
    return (
        m.second.sensitivity * _ratio(m.mass, m.first.mass),
        _ratio(m.mass, m.second.mass),
    )


def tuple_norm_factors(m: "Tuple") -> tuple[float, float]:
    return _ratio(m.mass, m.first.mass), _ratio(m.mass, m.second.mass)


def composite_dual_scales(m: "Composite") -> tuple[float, float]:
    return (
        _ratio(m.first.mass, m.mass) / m.second.sensitivity,
        _ratio(m.second.mass, m.mass),
    )


def tuple_dual_scales(m: "Tuple") -> tuple[float, float]:
    return _ratio(m.first.mass, m.mass), _ratio(m.second.mass, m.mass)


# -- modules -----------------------------------------------------------------


class Module:
    """Immutable node of a module tree."""

    mass: float
    sensitivity: float
    in_shape: tuple | None
    atoms: tuple

    def __setattr__(self, name, value):
        if getattr(self, "_frozen", False):
            raise AttributeError(f"{type(self).__name__} is immutable")
        object.__setattr__(self, name, value)

    def _freeze(self):
        self._frozen = True

    @property
    def n_leaves(self) -> int:
        return len(self.atoms)

    @property
    def out_shape(self):
        return self.output_shape(self.in_shape)

    def output_shape(self, in_shape):
        raise NotImplementedError

    def weight_shapes(self) -> list[tuple]:
        return [a.weight_shape for a in self.atoms]

    def check(self, tree):
        shapes = self.weight_shapes()
        if len(tree) != len(shapes) or any(l.shape != s for l, s in zip(tree, shapes)):
            got = [l.shape for l in tree]
            raise ShapeMismatch(f"tree leaves {got} do not match module leaves {shapes}")

    def init(self, rng: np.random.Generator) -> WeightTree:
        return WeightTree([init_weight(a, rng) for a in self.atoms])

    def zeros(self) -> WeightTree:
        return WeightTree([np.zeros(s) for s in self.weight_shapes()])

    def forward(self, w, x):
        self.check(w)
        return self._forward(w.leaves, x)

    def forward_cached(self, w, x):
        self.check(w)
        return self._forward_cached(w.leaves, x)

    def backward(self, w, cache, upstream):
        """Reverse-mode pass; returns ``(GradTree, grad_input)``."""
        grads, gx = self._backward(w.leaves, cache, upstream)
        return GradTree(grads), gx

    def jvp(self, w, x, dw, dx):
        """Forward-mode derivative along weight direction ``dw`` and input direction ``dx``."""
        self.check(w)
        self.check(dw)
        return self._jvp(w.leaves, x, dw.leaves, dx)

    # subclass hooks operate on raw leaf tuples
    def _norm(self, leaves) -> float:
        raise NotImplementedError

    def _dualize(self, leaves, schedule) -> list:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __eq__(self, other):
        return isinstance(other, Module) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(repr(self.to_dict()))


class Atom(Module):
    def __init__(self, spec: AtomSpec | str, dims=(), mass: float = 1.0, image=None):
        if not isinstance(spec, AtomSpec):
            spec = AtomSpec(spec, dims, mass, image)
        self.spec = spec
        self.mass = spec.mass
        self.sensitivity = spec.sensitivity
        self.in_shape = spec.input_shape
        self.atoms = (spec,)
        self._freeze()

    def __repr__(self):
        s = self.spec
        if s.kind.is_bond:
            return f"Atom({s.kind.value!r})"
        return f"Atom({s.kind.value!r}, {s.dims}, mass={s.mass})"

    def output_shape(self, in_shape):
        return self.spec.output_shape(in_shape)

    def _norm(self, leaves):
        return atom_norm(self.spec, leaves[0])

    def _dualize(self, leaves, schedule):
        g = leaves[0]
        if self.spec.kind.is_bond:
            return [EMPTY]
        if self.mass == 0:
            if np.any(g):
                raise ZeroMassWithGradient(f"{self!r} has zero mass but received a nonzero gradient")
            return [np.zeros_like(g)]
        return [atom_dualize(self.spec, g, schedule)]

    def _forward(self, leaves, x):
        return atom_forward(self.spec, leaves[0], x)

    def _forward_cached(self, leaves, x):
        return atom_forward(self.spec, leaves[0], x), x

    def _backward(self, leaves, cache, upstream):
        gw, gx = atom_backward(self.spec.kind, leaves[0], cache, upstream)
        return [gw], gx

    def _jvp(self, leaves, x, dleaves, dx):
        return atom_jvp(self.spec, leaves[0], x, dleaves[0], dx)

    def to_dict(self):
        s = self.spec
        d = {"kind": s.kind.value}
        if not s.kind.is_bond:
            d["dims"] = list(s.dims)
            d["mass"] = s.mass
        if s.image is not None:
            d["image"] = list(s.image)
        return d


class _Pair(Module):
    kind = ""

    def __init__(self, first: Module, second: Module):
        self.first = first
        self.second = second
        self.mass = first.mass + second.mass
        self.atoms = first.atoms + second.atoms
        self._split = first.n_leaves

    def __repr__(self):
        return f"{type(self).__name__}({self.first!r}, {self.second!r})"

    def _halves(self, leaves):
        return leaves[: self._split], leaves[self._split :]

    def to_dict(self):
        return {"kind": self.kind, "first": self.first.to_dict(), "second": self.second.to_dict()}


class Composite(_Pair):
    """``second o first``: apply ``first``, then ``second``."""

    kind = "composite"

    def __init__(self, first: Module, second: Module):
        super().__init__(first, second)
        self.sensitivity = first.sensitivity * second.sensitivity
        self.in_shape = first.in_shape
        try:
            self.output_shape(self.in_shape)
        except ValueError as exc:
            raise ShapeMismatch(f"cannot compose {first!r} into {second!r}: {exc}") from None
        self._freeze()

    def output_shape(self, in_shape):
        return self.second.output_shape(self.first.output_shape(in_shape))

    def _norm(self, leaves):
        l1, l2 = self._halves(leaves)
        c1, c2 = composite_norm_factors(self)
        t1 = c1 * self.first._norm(l1) if self.first.mass else 0.0
        t2 = c2 * self.second._norm(l2) if self.second.mass else 0.0
        return max(t1, t2)

    def _dualize(self, leaves, schedule):
        l1, l2 = self._halves(leaves)
        s1, s2 = composite_dual_scales(self)
        d1 = self.first._dualize(l1, schedule)
        d2 = self.second._dualize(l2, schedule)
        return [s1 * d for d in d1] + [s2 * d for d in d2]

    def _forward(self, leaves, x):
        l1, l2 = self._halves(leaves)
        return self.second._forward(l2, self.first._forward(l1, x))

    def _forward_cached(self, leaves, x):
        l1, l2 = self._halves(leaves)
        h, c1 = self.first._forward_cached(l1, x)
        y, c2 = self.second._forward_cached(l2, h)
        return y, (c1, c2)

    def _backward(self, leaves, cache, upstream):
        l1, l2 = self._halves(leaves)
        c1, c2 = cache
        g2, gh = self.second._backward(l2, c2, upstream)
        g1, gx = self.first._backward(l1, c1, gh)
        return g1 + g2, gx

    def _jvp(self, leaves, x, dleaves, dx):
        l1, l2 = self._halves(leaves)
        d1, d2 = self._halves(dleaves)
        h = self.first._forward(l1, x)
        dh = self.first._jvp(l1, x, d1, dx)
        return self.second._jvp(l2, h, d2, dh)


class Tuple(_Pair):
    """``x -> (first(x), second(x))``."""

    kind = "tuple"

    def __init__(self, first: Module, second: Module):
        super().__init__(first, second)
        self.sensitivity = first.sensitivity + second.sensitivity
        a, b = first.in_shape, second.in_shape
        if a is not None and b is not None and tuple(a) != tuple(b):
            raise ShapeMismatch(f"tuple children take different inputs: {a} vs {b}")
        self.in_shape = a if a is not None else b
        try:
            self.output_shape(self.in_shape)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from None
        self._freeze()

    def output_shape(self, in_shape):
        return (self.first.output_shape(in_shape), self.second.output_shape(in_shape))

    def _norm(self, leaves):
        l1, l2 = self._halves(leaves)
        c1, c2 = tuple_norm_factors(self)
        t1 = c1 * self.first._norm(l1) if self.first.mass else 0.0
        t2 = c2 * self.second._norm(l2) if self.second.mass else 0.0
        return max(t1, t2)

    def _dualize(self, leaves, schedule):
        l1, l2 = self._halves(leaves)
        s1, s2 = tuple_dual_scales(self)
        d1 = self.first._dualize(l1, schedule)
        d2 = self.second._dualize(l2, schedule)
        return [s1 * d for d in d1] + [s2 * d for d in d2]

    def _forward(self, leaves, x):
        l1, l2 = self._halves(leaves)
        return (self.first._forward(l1, x), self.second._forward(l2, x))

    def _forward_cached(self, leaves, x):
        l1, l2 = self._halves(leaves)
        y1, c1 = self.first._forward_cached(l1, x)
        y2, c2 = self.second._forward_cached(l2, x)
        return (y1, y2), (c1, c2)

    def _backward(self, leaves, cache, upstream):
        l1, l2 = self._halves(leaves)
        g1, gx1 = self.first._backward(l1, cache[0], upstream[0])
        g2, gx2 = self.second._backward(l2, cache[1], upstream[1])
        return g1 + g2, gx1 + gx2

    def _jvp(self, leaves, x, dleaves, dx):
        l1, l2 = self._halves(leaves)
        d1, d2 = self._halves(dleaves)
        return (self.first._jvp(l1, x, d1, dx), self.second._jvp(l2, x, d2, dx))


def chain(*modules: Module) -> Module:
    """Left-nested composite applying ``modules`` in order."""
    if not modules:
        raise ValueError("chain needs at least one module")
    m = modules[0]
    for nxt in modules[1:]:
        m = Composite(m, nxt)
    return m


# -- norm and duality map ----------------------------------------------------


def module_norm(m: Module, w: WeightTree) -> float:
    """Modular norm of ``w``: the recursive weighted max over leaf norms."""
    m.check(w)
    return float(m._norm(w.leaves))


def module_dualize(m: Module, g: GradTree, schedule: IterationSchedule = DEFAULT_SCHEDULE) -> WeightTree:
    """Duality map of the modular norm, applied leafwise with mass/sensitivity scaling.

    Raises
    ------
    ZeroMassWithGradient
        If a zero-mass atom carries a nonzero gradient.
    """
    if not isinstance(g, GradTree):
        raise TypeError("module_dualize takes a GradTree")
    m.check(g)
    return WeightTree(m._dualize(g.leaves, schedule))


# -- well-normedness probe ---------------------------------------------------


def activation_norm(y) -> float:
    """RMS for vectors, spatial max of channel RMS for images, sum over tuple parts."""
    if isinstance(y, tuple):
        return sum(activation_norm(part) for part in y)
    y = np.asarray(y)
    return spatial_max_rms(y) if y.ndim == 3 else rms_norm(y)


def _input_norm(m: Module, x) -> float:
    if m.atoms[0].kind is AtomKind.EMBED:
        return l1_norm(x)
    return activation_norm(x)


class ProbeReport:
    def __init__(self, trials, weight_ratio, input_ratio):
        self.trials = trials
        self.weight_ratio = weight_ratio
        self.input_ratio = input_ratio

    @property
    def max_ratio(self) -> float:
        return max(self.weight_ratio, self.input_ratio)

    def passed(self, slack: float = 1e-3) -> bool:
        return self.max_ratio <= 1.0 + slack

    def __repr__(self):
        return (
            f"ProbeReport(trials={self.trials}, weight_ratio={self.weight_ratio:.6f}, "
            f"input_ratio={self.input_ratio:.6f})"
        )


def well_normed_probe(m: Module, trials: int = 1000, seed: int = 0, in_shape=None) -> ProbeReport:
    """Measure both well-normedness ratios on random points.

    Each trial draws weights with every atom inside its own unit norm ball,
    an input inside the unit input ball, and random perturbations, then
    evaluates the exact forward-mode derivative. Reports the largest observed

    * ``||d_w f . dw||_Y / module_norm(dw)`` and
    * ``||d_x f . dx||_Y / (sensitivity * ||dx||_X)``.
    """
    rng = np.random.default_rng(seed)
    shape = in_shape if in_shape is not None else m.in_shape
    if shape is None:
        raise ValueError("probe needs a concrete input shape")
    zero_w = m.zeros()
    worst_w = worst_x = 0.0
    for _ in range(trials):
        w = WeightTree([init_weight(a, rng) * rng.uniform(0, 1) for a in m.atoms])
        x = rng.standard_normal(shape)
        x = x * (rng.uniform(0, 1) / _input_norm(m, x))
        dw = WeightTree([rng.standard_normal(s) for s in m.weight_shapes()])
        dx = rng.standard_normal(shape)
        nw = module_norm(m, dw)
        if nw > 0:
            worst_w = max(worst_w, activation_norm(m.jvp(w, x, dw, np.zeros(shape))) / nw)
        y = m.jvp(w, x, zero_w, dx)
        worst_x = max(worst_x, activation_norm(y) / (m.sensitivity * _input_norm(m, dx)))
    return ProbeReport(trials, worst_w, worst_x)


# -- serialization -----------------------------------------------------------


def from_dict(d: dict) -> Module:
    """Parse the nested ``{"kind": ...}`` architecture description."""
    if not isinstance(d, dict) or "kind" not in d:
        raise ValueError(f"architecture node must be an object with a 'kind', got {d!r}")
    kind = d["kind"]
    if kind in ("composite", "tuple"):
        extra = set(d) - {"kind", "first", "second"}
        if extra or "first" not in d or "second" not in d:
            raise ValueError(f"{kind} node needs exactly 'first' and 'second', got keys {sorted(d)}")
        cls = Composite if kind == "composite" else Tuple
        return cls(from_dict(d["first"]), from_dict(d["second"]))
    try:
        atom_kind = AtomKind(kind)
    except ValueError:
        raise ValueError(f"unknown module kind {kind!r}") from None
    extra = set(d) - {"kind", "dims", "mass", "image"}
    if extra:
        raise ValueError(f"unknown fields for {kind}: {sorted(extra)}")
    if atom_kind.is_bond:
        if set(d) - {"kind"}:
            raise ValueError(f"{kind} bond takes no fields besides 'kind'")
        return Atom(atom_kind)
    if "dims" not in d:
        raise ValueError(f"{kind} node needs 'dims'")
    return Atom(AtomSpec(atom_kind, tuple(d["dims"]), float(d.get("mass", 1.0)), d.get("image")))
