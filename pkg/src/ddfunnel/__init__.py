"""Data-driven funnel synthesis for nonlinear plants with an imperfect digital twin."""

from .dynamics import ArmParameters, DiscreteModel, PLANT_PARAMETERS, TWIN_PARAMETERS
from .nominal import BoundConstants, NominalTrajectory, plan_nominal_lqr
from .runtime import RunConfig, RunReport, run_online
from .synthesis import FunnelCertificate, solve_funnel_sdp

__all__ = [
    "ArmParameters",
    "DiscreteModel",
    "PLANT_PARAMETERS",
    "TWIN_PARAMETERS",
    "BoundConstants",
    "NominalTrajectory",
    "plan_nominal_lqr",
    "RunConfig",
    "RunReport",
    "run_online",
    "FunnelCertificate",
    "solve_funnel_sdp",
]

__version__ = "0.1.0"
