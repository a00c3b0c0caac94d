"""Multimodal deformable 3-D registration by progressive alignment.

One affine stage plus cascaded dense displacement-field refinements, each
minimising a multi-perspective loss (mutual information + multi-scale label
Dice + bending energy) by per-pair gradient descent with analytic gradients.
"""

__version__ = "0.1.0"

from .grid import GridMeta
from .volume import (
    LabelMask,
    PreprocessSettings,
    Volume,
    crop_pad,
    mask_bounding_box,
    normalize_minmax,
    preprocess,
    resample_isotropic,
)
from .nifti import read_nifti, write_nifti
from .transform import (
    AffineParams,
    DisplacementField,
    ScalarField,
    affine_to_field,
    compose,
    fraction_negative_jacobian,
    jacobian_determinant,
    load_field,
    save_field,
    spatial_gradient,
    warp,
)
from .filters import GaussianKernel
from .losses import (
    JointHistogram,
    LossBreakdown,
    LossWeights,
    bending_energy,
    bending_energy_gradient,
    finite_difference_check,
    gaussian_filter,
    gpl_loss,
    gpl_loss_gradient,
    joint_histogram,
    mi_loss,
    mi_loss_gradient,
    mpl_loss,
)
from .optim import AdamState, adam_step
from .registration import (
    RegistrationConfig,
    RegistrationPair,
    RegistrationResult,
    StageParameters,
    apply_to_companion,
    preprocess_pair,
    register,
    register_affine,
    register_cascade,
)
from .metrics import MetricsReport, dice, evaluate
from .phantom import (
    PhantomCase,
    PhantomParams,
    generate_phantom_pair,
    load_case,
    random_smooth_field,
    save_case,
)

__all__ = [
    "__version__",
    "GridMeta",
    "Volume",
    "LabelMask",
    "PreprocessSettings",
    "crop_pad",
    "mask_bounding_box",
    "normalize_minmax",
    "preprocess",
    "resample_isotropic",
    "read_nifti",
    "write_nifti",
    "AffineParams",
    "DisplacementField",
    "ScalarField",
    "affine_to_field",
    "compose",
    "fraction_negative_jacobian",
    "jacobian_determinant",
    "load_field",
    "save_field",
    "spatial_gradient",
    "warp",
    "GaussianKernel",
    "JointHistogram",
    "LossBreakdown",
    "LossWeights",
    "bending_energy",
    "bending_energy_gradient",
    "finite_difference_check",
    "gaussian_filter",
    "gpl_loss",
    "gpl_loss_gradient",
    "joint_histogram",
    "mi_loss",
    "mi_loss_gradient",
    "mpl_loss",
    "AdamState",
    "adam_step",
    "RegistrationConfig",
    "RegistrationPair",
    "RegistrationResult",
    "StageParameters",
    "apply_to_companion",
    "preprocess_pair",
    "register",
    "register_affine",
    "register_cascade",
    "MetricsReport",
    "dice",
    "evaluate",
    "PhantomCase",
    "PhantomParams",
    "generate_phantom_pair",
    "load_case",
    "random_smooth_field",
    "save_case",
]
