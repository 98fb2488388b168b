"""Loosely coupled GNSS/pseudolite and IMU positioning.

Per-epoch single-difference least-squares fixes are fused with preintegrated
IMU measurements in a factor graph and smoothed with Levenberg-Marquardt.
A synthetic scenario generator and evaluation tools are included.
"""

__version__ = "0.1.0"

from .frames import GeodeticCoord, ecef_to_geodetic, geodetic_to_ecef  # noqa: E402
from .graph import FactorGraph, OptimizerConfig, build_graph, solve  # noqa: E402
from .navstate import ImuBias, NavState  # noqa: E402
from .pipeline import FgoConfig, run_scenario, solve_fgo, solve_ls_epochs  # noqa: E402
from .preintegration import ImuNoiseParams, preintegrate  # noqa: E402
from .pseudorange import compute_dop, single_difference, solve_ls  # noqa: E402
from .sim import ScenarioConfig, default_paper_scenarios, simulate  # noqa: E402

__all__ = [
    "FactorGraph",
    "FgoConfig",
    "GeodeticCoord",
    "ImuBias",
    "ImuNoiseParams",
    "NavState",
    "OptimizerConfig",
    "ScenarioConfig",
    "build_graph",
    "compute_dop",
    "default_paper_scenarios",
    "ecef_to_geodetic",
    "geodetic_to_ecef",
    "preintegrate",
    "run_scenario",
    "simulate",
    "single_difference",
    "solve",
    "solve_fgo",
    "solve_ls",
    "solve_ls_epochs",
]
