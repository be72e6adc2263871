"""Exception hierarchy.

Two families matter to callers: configuration problems (bad input, exit
code 2 on the command line) and numerical failures (exit code 3).
"""

from typing import Any, Dict, Optional


class SplitPlotError(Exception):
    """Base class carrying a stable machine code and optional context."""

    code = "error"
    exit_code = 1

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = dict(context or {})

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.code, "message": self.message, "context": self.context}


class InputError(SplitPlotError):
    exit_code = 2


class NumericalError(SplitPlotError):
    exit_code = 3


class InvalidDesign(InputError):
    code = "invalid_design"


class SpaceTooLarge(InputError):
    code = "space_too_large"


class ConfigError(InputError):
    code = "config_error"


class SchemaError(InputError):
    code = "schema_error"


class CountMismatch(InputError):
    code = "count_mismatch"


class DegenerateWholePlot(InputError):
    code = "degenerate_whole_plot"


class InsufficientArms(InputError):
    code = "insufficient_arms"


class EmptyArm(NumericalError):
    code = "empty_arm"


class NotPSD(NumericalError):
    code = "not_psd"


class Underflow(NumericalError):
    code = "underflow"


class RejectionBudgetExceeded(NumericalError):
    code = "rejection_budget_exceeded"

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None, best: Any = None):
        super().__init__(message, context)
        self.best = best


class SingularMatrix(NumericalError):
    code = "singular_matrix"


class SingularSigmaXX(SingularMatrix):
    code = "singular_sigma_xx"


class SingularSigmaVV(SingularMatrix):
    code = "singular_sigma_vv"


class SingularPerp(SingularMatrix):
    code = "singular_perp"


class RankDeficientDesignMatrix(NumericalError):
    code = "rank_deficient_design_matrix"
