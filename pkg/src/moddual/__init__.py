"""Modular norms, duality maps and dualized steepest descent in numpy."""

from .algebra import (
    Atom,
    Composite,
    GradTree,
    Module,
    ShapeMismatch,
    Tuple,
    WeightTree,
    ZeroMassWithGradient,
    apply_update,
    chain,
    from_dict,
    module_dualize,
    module_norm,
    pairing,
    well_normed_probe,
)
from .atoms import AtomKind, AtomSpec, conv2d_dualize, embed_dualize, linear_dualize
from .linalg import op_norm_l1_rms, op_norm_rms_rms, rms_norm, spectral_norm, svd_oracle
from .optim import FixedStep, SharpnessScaled, TrainingDiverged, dual_norm, steepest_step, train
from .polar import (
    DEFAULT_SCHEDULE,
    IterationSchedule,
    NonConvergence,
    Normalization,
    inverse_root_dualize,
    orthogonalize,
    validate_coefficients,
)

__version__ = "0.1.0"

__all__ = [
    "Atom",
    "Composite",
    "GradTree",
    "Module",
    "ShapeMismatch",
    "Tuple",
    "WeightTree",
    "ZeroMassWithGradient",
    "apply_update",
    "chain",
    "from_dict",
    "module_dualize",
    "module_norm",
    "pairing",
    "well_normed_probe",
    "AtomKind",
    "AtomSpec",
    "conv2d_dualize",
    "embed_dualize",
    "linear_dualize",
    "op_norm_l1_rms",
    "op_norm_rms_rms",
    "rms_norm",
    "spectral_norm",
    "svd_oracle",
    "FixedStep",
    "SharpnessScaled",
    "TrainingDiverged",
    "dual_norm",
    "steepest_step",
    "train",
    "DEFAULT_SCHEDULE",
    "IterationSchedule",
    "NonConvergence",
    "Normalization",
    "inverse_root_dualize",
    "orthogonalize",
    "validate_coefficients",
]
