"""Calibration-field toolkit for sharp area bounds of minimal submanifolds through a ball center."""

__version__ = "0.1.0"

from .calibration import (  # noqa: E402
    CalibrationField,
    ConditionReport,
    Frame,
    Tolerances,
    asymptotic_constant,
    eval_f,
    eval_f_prime,
    frame_divergence,
    frame_divergence_oracle,
    geodesic_disk_area,
    ode_residual,
    random_frame,
    unit_sphere_area,
    verify_conditions,
)
from .warp_geometry import (  # noqa: E402
    BallPoint,
    PolarPoint,
    WarpProfile,
    ball_from_polar,
    chart_christoffels,
    log_derivative,
    make_profile,
    polar_from_ball,
)
