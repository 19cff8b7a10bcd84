"""Erasure-coded transfer of hierarchical scientific data over lossy links.

Subpackages: :mod:`ectransfer.sim` (seeded discrete-event simulator) and
:mod:`ectransfer.transport` (UDP sender and receiver). The planning formulas
live in :mod:`ectransfer.reliability`, the Reed-Solomon coder in
:mod:`ectransfer.erasure`.
"""

from .model import (
    CodingPlan,
    DeadlineRequest,
    ErrorBoundRequest,
    HierarchySpec,
    LevelSpec,
    ModelError,
    NetworkParams,
    UnsatisfiableBoundError,
    nyx_hierarchy,
    nyx_mini_hierarchy,
)
from .reliability import (
    DeadlineInfeasibleError,
    DivergenceError,
    expected_error,
    expected_total_time,
    minimize_expected_error,
    optimize_parity_for_min_error,
    optimize_parity_for_min_time,
    p_unrecoverable,
)

__version__ = "0.1.0"

__all__ = [
    "CodingPlan", "DeadlineInfeasibleError", "DeadlineRequest", "DivergenceError", "ErrorBoundRequest",
    "HierarchySpec", "LevelSpec", "ModelError", "NetworkParams", "UnsatisfiableBoundError", "expected_error",
    "expected_total_time", "minimize_expected_error", "nyx_hierarchy", "nyx_mini_hierarchy",
    "optimize_parity_for_min_error", "optimize_parity_for_min_time", "p_unrecoverable",
]
