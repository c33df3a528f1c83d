"""Robust bi-level data-driven predictive control.

Trajectories are predicted from Hankel matrices of measured data. The
prediction is the solution of a regularized least-squares lower level, and
the controller is a robust QP with causal disturbance feedback on top.
"""

__version__ = "0.1.0"

from .hankel import Dataset, DimensionError, HankelStack, build_hankel, build_stack, push_sample  # noqa: E402
from .predictor import (  # noqa: E402
    FactorizationError,
    KktFactor,
    NoiseModel,
    RegularizerWeights,
    affine_predictor,
    factorize_kkt,
    predict,
    solve_lower,
)
from .robust import AffineExpr, Box, ControlSolution, ObjectiveSpec, solve_control  # noqa: E402

__all__ = [
    "AffineExpr",
    "Box",
    "ControlSolution",
    "Dataset",
    "DimensionError",
    "FactorizationError",
    "HankelStack",
    "KktFactor",
    "NoiseModel",
    "ObjectiveSpec",
    "RegularizerWeights",
    "__version__",
    "affine_predictor",
    "build_hankel",
    "build_stack",
    "factorize_kkt",
    "predict",
    "push_sample",
    "solve_control",
    "solve_lower",
]
