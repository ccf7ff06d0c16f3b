"""Synthetic datasets, reference architectures and experiment configs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .algebra import Atom, Module, chain, from_dict
from .optim import FixedStep, SharpnessScaled
from .polar import IterationSchedule

__all__ = [
    "reference_mlp",
    "reference_cnn",
    "gaussian_regression",
    "spiral",
    "stripe_images",
    "DATASETS",
    "make_dataset",
    "ExperimentConfig",
    "TRAIN_SCHEDULE",
    "MLP_REGRESSION",
    "CNN_IMAGES",
]

# Mid-training gradients have singular values spread over many decades, and
# the cubic iteration needs about log(1/s)/log(1.5) steps to lift a value s.
TRAIN_SCHEDULE = IterationSchedule(max_steps=100)


def reference_mlp(d_in: int = 8, width: int = 32, d_out: int = 1, mass: float = 1.0) -> Module:
    """Linear -> ReLU -> Linear -> ReLU -> Linear."""
    return chain(
        Atom("linear", (width, d_in), mass),
        Atom("relu"),
        Atom("linear", (width, width), mass),
        Atom("relu"),
        Atom("linear", (d_out, width), mass),
    )


def reference_cnn(image=(8, 8), channels: int = 1, width: int = 4, d_out: int = 2, k: int = 3, mass: float = 1.0) -> Module:
    """Conv2D -> ReLU -> Conv2D -> ReLU -> Flatten -> Linear."""
    w, h = image
    mid = (w - k + 1, h - k + 1)
    out = (mid[0] - k + 1) * (mid[1] - k + 1) * width
    return chain(
        Atom("conv2d", (width, channels, k), mass, image),
        Atom("relu"),
        Atom("conv2d", (width, width, k), mass, mid),
        Atom("relu"),
        Atom("flatten"),
        Atom("linear", (d_out, out), mass),
    )


def gaussian_regression(size: int = 256, seed: int = 0, d_in: int = 8, d_out: int = 1, hidden: int = 16):
    """Gaussian inputs, targets from a random one-hidden-layer tanh teacher, unit variance."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((size, d_in))
    w1 = rng.standard_normal((hidden, d_in)) / np.sqrt(d_in)
    w2 = rng.standard_normal((d_out, hidden)) / np.sqrt(hidden)
    y = np.tanh(x @ w1.T) @ w2.T
    return x, y / y.std()


def spiral(size: int = 256, seed: int = 0, turns: float = 1.5, noise: float = 0.05):
    """Two interleaved 2-D spirals with integer labels 0 and 1."""
    rng = np.random.default_rng(seed)
    labels = np.arange(size) % 2
    r = rng.uniform(0.1, 1.0, size)
    theta = 2 * np.pi * turns * r + np.pi * labels
    x = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return x + noise * rng.standard_normal(x.shape), labels


def stripe_images(size: int = 128, seed: int = 0, image=(8, 8), noise: float = 0.3):
    """Single-channel images of horizontal (label 0) or vertical (label 1) stripes plus noise."""
    rng = np.random.default_rng(seed)
    w, h = image
    labels = np.arange(size) % 2
    phase = rng.integers(0, 2, size)
    i = np.arange(w)[None, :, None]
    j = np.arange(h)[None, None, :]
    p = phase[:, None, None]
    base = np.where(labels[:, None, None] == 0, (i + p) % 2, (j + p) % 2).astype(float)
    x = 2 * base - 1 + noise * rng.standard_normal((size, w, h))
    return x[..., None], labels


DATASETS = {"gaussian_regression": gaussian_regression, "spiral": spiral, "stripe_images": stripe_images}


def make_dataset(spec: dict):
    spec = dict(spec)
    name = spec.pop("name")
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    if "image" in spec:
        spec["image"] = tuple(spec["image"])
    return DATASETS[name](**spec)


_CONFIG_FIELDS = {"architecture", "architecture_file", "dataset", "rule", "schedule", "loss", "steps", "seed", "out"}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one ``train`` run.

    The architecture is given inline (``architecture``) or as a path to a
    JSON file (``architecture_file``); exactly one is required.
    """

    dataset: dict
    architecture: dict | None = None
    architecture_file: str | None = None
    rule: dict = field(default_factory=lambda: {"mode": "fixed_step", "eta": 0.02})
    schedule: dict = field(default_factory=TRAIN_SCHEDULE.to_dict)
    loss: str = "mse"
    steps: int = 500
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if (self.architecture is None) == (self.architecture_file is None):
            raise ValueError("give exactly one of 'architecture' and 'architecture_file'")
        if self.loss not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ValueError("steps must be a non-negative integer")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if "name" not in self.dataset:
            raise ValueError("dataset needs a 'name'")
        self.update_rule()  # validate eagerly

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - _CONFIG_FIELDS
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "dataset" not in d:
            raise ValueError("config needs a 'dataset'")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        cfg = cls.from_dict(d)
        if cfg.architecture_file is not None and not os.path.isabs(cfg.architecture_file):
            base = os.path.dirname(os.path.abspath(path))
            cfg.architecture_file = os.path.join(base, cfg.architecture_file)
        return cfg

    def to_dict(self) -> dict:
        d = {
            "dataset": self.dataset,
            "rule": self.rule,
            "schedule": self.schedule,
            "loss": self.loss,
            "steps": self.steps,
            "seed": self.seed,
        }
        if self.architecture is not None:
            d["architecture"] = self.architecture
        else:
            d["architecture_file"] = self.architecture_file
        if self.out is not None:
            d["out"] = self.out
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def module(self) -> Module:
        arch = self.architecture
        if arch is None:
            with open(self.architecture_file, encoding="utf-8") as fh:
                arch = json.load(fh)
        return from_dict(arch)

    def iteration_schedule(self) -> IterationSchedule:
        return IterationSchedule.from_dict(self.schedule)

    def update_rule(self):
        rule = dict(self.rule)
        mode = rule.pop("mode", "fixed_step")
        schedule = self.iteration_schedule()
        if mode == "fixed_step":
            if set(rule) != {"eta"}:
                raise ValueError("fixed_step rule takes exactly 'eta'")
            return FixedStep(float(rule["eta"]), schedule)
        if mode == "sharpness_scaled":
            if set(rule) != {"sharpness"}:
                raise ValueError("sharpness_scaled rule takes exactly 'sharpness'")
            return SharpnessScaled(float(rule["sharpness"]), schedule)
        raise ValueError(f"unknown update mode {mode!r}")


MLP_REGRESSION = ExperimentConfig(
    architecture=reference_mlp().to_dict(),
    dataset={"name": "gaussian_regression", "size": 256, "seed": 0},
    rule={"mode": "fixed_step", "eta": 0.02},
    loss="mse",
    steps=500,
    seed=0,
)

CNN_IMAGES = ExperimentConfig(
    architecture=reference_cnn().to_dict(),
    dataset={"name": "stripe_images", "size": 128, "seed": 0},
    rule={"mode": "fixed_step", "eta": 0.05},
    loss="cross_entropy",
    steps=200,
    seed=0,
)
