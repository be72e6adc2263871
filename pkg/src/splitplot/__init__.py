"""Randomization, rerandomization, estimation and inference for 2x2 split-plot experiments."""

from .design import Assignment, DesignSpec, PopulationData, ValidatedDesign, randomize, validate_design
from .errors import SplitPlotError
from .estimators import G, arm_estimate, effect_estimate
from .rerandomization import build_criterion, rerandomize
from .simharness import StudyConfig, run_study

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "DesignSpec",
    "G",
    "PopulationData",
    "SplitPlotError",
    "StudyConfig",
    "ValidatedDesign",
    "arm_estimate",
    "build_criterion",
    "effect_estimate",
    "randomize",
    "rerandomize",
    "run_study",
    "validate_design",
]
