"""Solver configuration shared by every fitting and alignment routine.

=====================  ========  =================================================
field                  default   meaning
=====================  ========  =================================================
max_iterations         15        outer iterations of the joint solvers
step_tol               1e-7      joint solvers stop when the step max-norm is below
cost_tol               1e-6      joint solvers stop when the relative cost decrease is below
icp_iterations         30        Gauss-Newton iterations for ICP-ftf / ICP-bundle
icp_step_tol           1e-9      ICP step max-norm convergence threshold
fit_iterations         25        single-frame quadric fit iterations
fit_step_tol           1e-8      single-frame quadric fit convergence threshold
fair_scale             None      fair-weight constant n; None = 2x median residual
fair_scale_floor       1e-3      lower bound (m) on the data-driven fair constant
gap_reject             0.10      correspondence rejection distance (m)
angle_reject           30 deg    correspondence rejection normal angle (rad)
max_step_norm          1.0       cap on the pose step norm
radius_scale           0.0125    neighborhood radius per metre of anchor depth
stride                 4         anchor subsampling stride in pixels
normal_window          7         odd pixel window for normal estimation
max_damping_retries    5         rejected-step retries before declaring convergence
threads                1         worker threads for per-chunk accumulation
=====================  ========  =================================================
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 15
    step_tol: float = 1e-7
    cost_tol: float = 1e-6
    icp_iterations: int = 30
    icp_step_tol: float = 1e-9
    fit_iterations: int = 25
    fit_step_tol: float = 1e-8
    fair_scale: float | None = None
    fair_scale_floor: float = 1e-3
    gap_reject: float = 0.10
    angle_reject: float = math.radians(30.0)
    max_step_norm: float = 1.0
    radius_scale: float = 0.0125
    stride: int = 4
    normal_window: int = 7
    max_damping_retries: int = 5
    threads: int = 1

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not v > 0:
                raise ValueError(f"SolverConfig.{f.name} must be positive, got {v!r}")
        for name in ("max_iterations", "icp_iterations", "fit_iterations"):
            if getattr(self, name) > 200:
                raise ValueError(f"SolverConfig.{name} must be <= 200")
        if self.normal_window % 2 == 0 or self.normal_window < 3:
            raise ValueError("normal_window must be odd and >= 3")

    def with_(self, **changes) -> SolverConfig:
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)
