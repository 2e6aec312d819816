"""Decentralized Nash-equilibrium seeking for the CrowdCache storage game."""

from .errors import (
    ConfigError,
    CrowdCacheError,
    IngestionError,
    InvalidInputError,
    SolverFailureError,
    StepSizeTooLargeError,
    UndefinedQuantityError,
)
from .experiments import BaseCaseSpec, GraphConfig, sample_base_case
from .game import AnalysisConstants, GameParams, StrategyProfile, analysis_constants, utilities
from .graphs import DevicePositions, GraphSequence, GraphSnapshot, MobileGraphs, geometric_graph
from .solvers import (
    RunTrace,
    SolverConfig,
    StepSizeReport,
    max_admissible_step,
    solve_centralized,
    solve_dcrowdcache,
    solve_dcrowdcache_m,
    solve_ne_oracle,
    step_size_report,
)

__version__ = "0.1.0"
