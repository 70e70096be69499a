"""Joint pose and dense-curvature estimation from depth frames with parabolic quadrics."""

from .config import SolverConfig
from .quadric import CurvatureMap, Quadric, principal_curvatures
from .rigid import RigidTransform, exp_update, se3_exp

__version__ = "0.1.0"

__all__ = [
    "CurvatureMap",
    "Quadric",
    "RigidTransform",
    "SolverConfig",
    "exp_update",
    "principal_curvatures",
    "se3_exp",
]
