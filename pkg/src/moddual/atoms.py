"""Atomic modules (Linear, Embed, Conv2D) and weightless bonds (ReLU, Flatten).

Conventions
-----------
* Linear/Embed weights are ``(d_out, d_in)`` matrices; inputs are vectors of
  length ``d_in`` or batches of shape ``(batch, d_in)``.
* Conv2D weights are ``(d_out, d_in, k, k)``; images are ``(W, H, d_in)`` or
  ``(batch, W, H, d_in)``. The convolution is a valid (unpadded) stride-1
  cross-correlation, so outputs are ``(W - k + 1, H - k + 1, d_out)``.
* Bonds have no weights; their weight slot is an empty array.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import polar
from .linalg import as_matrix, as_tensor4, l1_norm, op_norm_l1_rms, op_norm_rms_rms, rms_norm
from .polar import DEFAULT_SCHEDULE, IterationSchedule, NonConvergence

EMPTY = np.zeros(0)


class AtomKind(str, enum.Enum):
    LINEAR = "linear"
    EMBED = "embed"
    CONV2D = "conv2d"
    RELU = "relu"
    FLATTEN = "flatten"

    @property
    def is_bond(self) -> bool:
        return self in (AtomKind.RELU, AtomKind.FLATTEN)


@dataclass(frozen=True)
class AtomSpec:
    """Static description of an atom.

    ``dims`` is ``(d_out, d_in)`` for Linear/Embed and ``(d_out, d_in, k)``
    for Conv2D; bonds take ``()``. ``image`` is the ``(W, H)`` input size of a
    Conv2D atom, needed to check composability.
    """

    kind: AtomKind
    dims: tuple = ()
    mass: float = 1.0
    image: tuple | None = None

    def __post_init__(self):
        kind = AtomKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.image is not None:
            object.__setattr__(self, "image", tuple(int(d) for d in self.image))
        if kind.is_bond:
            if self.dims:
                raise ValueError(f"{kind.value} bond takes no dims")
            object.__setattr__(self, "mass", 0.0)
            return
        if self.mass < 0:
            raise ValueError("mass must be non-negative")
        want = 3 if kind is AtomKind.CONV2D else 2
        if len(self.dims) != want or min(self.dims) < 1:
            raise ValueError(f"{kind.value} needs {want} positive dims, got {self.dims}")
        if kind is AtomKind.CONV2D:
            if self.image is None or len(self.image) != 2:
                raise ValueError("conv2d needs an (W, H) image size")
            k = self.dims[2]
            if min(self.image) < k:
                raise ValueError(f"image {self.image} smaller than kernel {k}")
        elif self.image is not None:
            raise ValueError(f"{kind.value} takes no image size")

    @property
    def sensitivity(self) -> float:
        return 1.0

    @property
    def weight_shape(self) -> tuple:
        if self.kind.is_bond:
            return (0,)
        if self.kind is AtomKind.CONV2D:
            d_out, d_in, k = self.dims
            return (d_out, d_in, k, k)
        return self.dims

    @property
    def input_shape(self) -> tuple | None:
        if self.kind.is_bond:
            return None
        if self.kind is AtomKind.CONV2D:
            return (*self.image, self.dims[1])
        return (self.dims[1],)

    def output_shape(self, in_shape: tuple | None) -> tuple | None:
        if self.kind is AtomKind.RELU:
            return in_shape
        if self.kind is AtomKind.FLATTEN:
            return None if in_shape is None else (int(np.prod(in_shape)),)
        if in_shape is not None and tuple(in_shape) != self.input_shape:
            raise ValueError(f"{self.kind.value} expects input {self.input_shape}, got {tuple(in_shape)}")
        if self.kind is AtomKind.CONV2D:
            d_out, _, k = self.dims
            w, h = self.image
            return (w - k + 1, h - k + 1, d_out)
        return (self.dims[0],)


# -- forward ----------------------------------------------------------------


def linear_forward(w, x) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"dimension mismatch: weight {w.shape}, input {x.shape}")
    return x @ w.T


embed_forward = linear_forward


def conv2d_forward(w, x) -> np.ndarray:
    """Valid stride-1 cross-correlation ``y[u,v,c] = sum W[c,m,i,j] x[u+i,v+j,m]``."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d_out, d_in, k, _ = w.shape
    if x.ndim < 3 or x.shape[-1] != d_in:
        raise ValueError(f"expected (..., W, H, {d_in}) input, got {x.shape}")
    if x.shape[-3] < k or x.shape[-2] < k:
        raise ValueError(f"spatial dims {x.shape[-3:-1]} smaller than kernel {k}")
    patches = sliding_window_view(x, (k, k), axis=(-3, -2))  # (..., U, V, m, i, j)
    return np.einsum("...uvmij,cmij->...uvc", patches, w)


def relu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0)


# -- norms ------------------------------------------------------------------


linear_norm = op_norm_rms_rms
embed_norm = op_norm_l1_rms


def conv2d_norm(w) -> float:
    """``k**2`` times the largest RMS->RMS norm over kernel slices."""
    w = as_tensor4(w, "w")
    k = w.shape[2]
    return k * k * max(op_norm_rms_rms(w[:, :, i, j]) for i in range(k) for j in range(k))


def spatial_max_rms(x) -> float:
    """Largest RMS norm over the channel vectors of a ``(W, H, C)`` image."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.max(np.sqrt(np.mean(x * x, axis=-1))))


# -- duality maps -----------------------------------------------------------


def linear_dualize(g, schedule: IterationSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    g = as_matrix(g, "g")
    d_out, d_in = g.shape
    x, _ = polar.orthogonalize(g, schedule)
    return np.sqrt(d_out / d_in) * x


def embed_dualize(g) -> np.ndarray:
    """Normalize every nonzero column to unit RMS; zero columns stay zero."""
    g = as_matrix(g, "g")
    # Each column is rescaled by a power of two first, so its RMS cannot
    # underflow; the result does not depend on column scale anyway.
    peak = np.abs(g).max(axis=0) if g.shape[0] else np.zeros(g.shape[1])
    nz = peak > 0
    cols = np.ldexp(g[:, nz], -np.frexp(peak[nz])[1])
    out = np.zeros_like(g)
    out[:, nz] = cols / (np.linalg.norm(cols, axis=0) / np.sqrt(g.shape[0]))
    return out


def conv2d_dualize(g, schedule: IterationSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    g = as_tensor4(g, "g")
    d_out, d_in, k, _ = g.shape
    out = np.empty_like(g)
    scale = np.sqrt(d_out / d_in) / (k * k)
    for i in range(k):
        for j in range(k):
            try:
                x, _ = polar.orthogonalize(g[:, :, i, j], schedule)
            except NonConvergence as exc:
                raise NonConvergence(f"kernel slice ({i}, {j}): {exc}", exc.result, exc.report) from exc
            out[:, :, i, j] = scale * x
    return out


# -- per-atom dispatch ------------------------------------------------------


def atom_forward(spec: AtomSpec, w, x) -> np.ndarray:
    kind = spec.kind
    if kind is AtomKind.RELU:
        return relu(x)
    if kind is AtomKind.FLATTEN:
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(*x.shape[:-3], -1) if x.ndim >= 3 else x
    if kind is AtomKind.CONV2D:
        return conv2d_forward(w, x)
    return linear_forward(w, x)


def atom_backward(kind, w, x, upstream):
    """Adjoint of ``atom_forward`` at ``(w, x)``; returns ``(grad_w, grad_x)``.

    Batched inputs produce weight gradients summed over the batch; bonds
    return the empty weight gradient.
    """
    kind = AtomKind(kind)
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if kind is AtomKind.RELU:
        if upstream.shape != x.shape:
            raise ValueError(f"dimension mismatch: upstream {upstream.shape}, input {x.shape}")
        return EMPTY, upstream * (x > 0)
    if kind is AtomKind.FLATTEN:
        return EMPTY, upstream.reshape(x.shape)
    w = np.asarray(w, dtype=np.float64)
    if kind is AtomKind.CONV2D:
        return _conv2d_backward(w, x, upstream)
    if x.shape[-1] != w.shape[1] or upstream.shape[-1] != w.shape[0] or x.shape[:-1] != upstream.shape[:-1]:
        raise ValueError(f"dimension mismatch: weight {w.shape}, input {x.shape}, upstream {upstream.shape}")
    xs = x.reshape(-1, w.shape[1])
    us = upstream.reshape(-1, w.shape[0])
    return us.T @ xs, upstream @ w


def _conv2d_backward(w, x, upstream):
    d_out, d_in, k, _ = w.shape
    out_shape = (*x.shape[:-3], x.shape[-3] - k + 1, x.shape[-2] - k + 1, d_out)
    if upstream.shape != out_shape:
        raise ValueError(f"dimension mismatch: upstream {upstream.shape}, expected {out_shape}")
    U, V = out_shape[-3], out_shape[-2]
    patches = sliding_window_view(x, (k, k), axis=(-3, -2)).reshape(-1, U, V, d_in, k, k)
    grad_w = np.einsum("buvmij,buvc->cmij", patches, upstream.reshape(-1, U, V, d_out))
    grad_x = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            grad_x[..., i : i + U, j : j + V, :] += upstream @ w[:, :, i, j]
    return grad_w, grad_x


def atom_jvp(spec: AtomSpec, w, x, dw, dx) -> np.ndarray:
    """Forward-mode derivative of ``atom_forward`` along ``(dw, dx)``."""
    kind = spec.kind
    if kind is AtomKind.RELU:
        return np.asarray(dx, dtype=np.float64) * (np.asarray(x) > 0)
    if kind is AtomKind.FLATTEN:
        return atom_forward(spec, None, dx)
    fwd = conv2d_forward if kind is AtomKind.CONV2D else linear_forward
    return fwd(dw, x) + fwd(w, dx)


def atom_norm(spec: AtomSpec, w) -> float:
    kind = spec.kind
    if kind.is_bond:
        return 0.0
    if kind is AtomKind.CONV2D:
        return conv2d_norm(w)
    if kind is AtomKind.EMBED:
        return embed_norm(w)
    return linear_norm(w)


def atom_dualize(spec: AtomSpec, g, schedule: IterationSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    kind = spec.kind
    if kind.is_bond:
        return EMPTY
    if kind is AtomKind.CONV2D:
        return conv2d_dualize(g, schedule)
    if kind is AtomKind.EMBED:
        return embed_dualize(g)
    return linear_dualize(g, schedule)


def input_norm(spec: AtomSpec, x) -> float:
    """Norm the atom assumes on its input space (used by probes only)."""
    if spec.kind is AtomKind.EMBED:
        return l1_norm(x)
    if spec.kind is AtomKind.CONV2D:
        return spatial_max_rms(x)
    return rms_norm(x)


def output_norm(spec: AtomSpec, y) -> float:
    if spec.kind is AtomKind.CONV2D:
        return spatial_max_rms(y)
    return rms_norm(y)


def init_weight(spec: AtomSpec, rng: np.random.Generator) -> np.ndarray:
    """Random weight with atom norm exactly 1 (semi-orthogonal slices, unit-RMS columns)."""
    kind = spec.kind
    if kind.is_bond:
        return EMPTY

    def semi_orthogonal(d_out, d_in):
        a = rng.standard_normal((max(d_out, d_in), min(d_out, d_in)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        return q if d_out >= d_in else q.T

    if kind is AtomKind.EMBED:
        return embed_dualize(rng.standard_normal(spec.dims))
    if kind is AtomKind.LINEAR:
        d_out, d_in = spec.dims
        return np.sqrt(d_out / d_in) * semi_orthogonal(d_out, d_in)
    d_out, d_in, k = spec.dims
    w = np.empty((d_out, d_in, k, k))
    for i in range(k):
        for j in range(k):
            w[:, :, i, j] = np.sqrt(d_out / d_in) / (k * k) * semi_orthogonal(d_out, d_in)
    return w
