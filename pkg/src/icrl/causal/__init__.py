from .direction import DeltaScores, DirectionResult, anm_direction, delta_criterion
from .independence import (
    CIConfig,
    CITestResult,
    distance_correlation,
    test_cond_independence,
    test_independence,
)
from .kernel_ridge import GaussianKernelRidge
from .rules import (
    EmptyParentSetError,
    ParentVerdict,
    StructureVerdict,
    assess_dimensions,
    classify_structure,
    discover_parents,
    fallback_parent,
    replay,
)
from .selector import CausalParentSelector

__all__ = [
    "CIConfig", "CITestResult", "distance_correlation", "test_independence",
    "test_cond_independence", "GaussianKernelRidge", "DirectionResult",
    "DeltaScores", "anm_direction", "delta_criterion", "StructureVerdict",
    "ParentVerdict", "EmptyParentSetError", "classify_structure",
    "assess_dimensions", "discover_parents", "fallback_parent", "replay",
    "CausalParentSelector",
]
