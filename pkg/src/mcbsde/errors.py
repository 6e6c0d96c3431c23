"""Error taxonomy shared by all modules.

Every exception carries a stable ``code`` (used in CLI error records) and an
``exit_code``: 2 for validation problems (bad inputs, violated declarations),
3 for numerical failures (divergence, blow-up, failed contraction).
"""

from __future__ import annotations

__all__ = [
    "McbsdeError",
    "ValidationFailure",
    "NumericalFailure",
    "EmptyGrid",
    "ColumnSumNonZero",
    "NegativeOffDiagonal",
    "TimeOutOfRange",
    "TimeOrderViolation",
    "DimensionMismatch",
    "GridMismatch",
    "WellposednessViolated",
    "NonFiniteValue",
    "BudgetExceeded",
    "ContractionFailure",
    "IndexTooSmall",
    "NoConvergence",
    "MonotonicityViolated",
    "GrowthViolated",
    "HypothesisViolated",
    "SingularVolatility",
    "ThetaBoundViolated",
    "NonpositiveJumpFactor",
    "NonpositivePrice",
    "LexError",
    "ExpressionSyntaxError",
    "UnknownIdentifier",
    "ArityError",
    "EvaluationError",
    "ScenarioParseError",
    "SchemaError",
    "ScenarioValidationError",
]


class McbsdeError(Exception):
    """Base class; not raised directly."""

    code = "Error"
    exit_code = 2


class ValidationFailure(McbsdeError):
    exit_code = 2


class NumericalFailure(McbsdeError):
    exit_code = 3


# chain_core
class EmptyGrid(ValidationFailure):
    code = "EmptyGrid"


class ColumnSumNonZero(ValidationFailure):
    code = "ColumnSumNonZero"


class NegativeOffDiagonal(ValidationFailure):
    code = "NegativeOffDiagonal"


class TimeOutOfRange(ValidationFailure):
    code = "TimeOutOfRange"


class TimeOrderViolation(ValidationFailure):
    code = "TimeOrderViolation"


class DimensionMismatch(ValidationFailure):
    code = "DimensionMismatch"


class GridMismatch(ValidationFailure):
    code = "GridMismatch"


# solvers
class WellposednessViolated(ValidationFailure):
    code = "WellposednessViolated"


class NonFiniteValue(NumericalFailure):
    code = "NonFiniteValue"


class BudgetExceeded(ValidationFailure):
    code = "BudgetExceeded"


class ContractionFailure(NumericalFailure):
    code = "ContractionFailure"


class IndexTooSmall(ValidationFailure):
    code = "IndexTooSmall"


class NoConvergence(NumericalFailure):
    code = "NoConvergence"


class MonotonicityViolated(NumericalFailure):
    code = "MonotonicityViolated"


class GrowthViolated(ValidationFailure):
    code = "GrowthViolated"


class HypothesisViolated(ValidationFailure):
    code = "HypothesisViolated"


# market
class SingularVolatility(ValidationFailure):
    code = "SingularVolatility"


class ThetaBoundViolated(ValidationFailure):
    code = "ThetaBoundViolated"


class NonpositiveJumpFactor(ValidationFailure):
    code = "NonpositiveJumpFactor"


class NonpositivePrice(NumericalFailure):
    code = "NonpositivePrice"


# expression language
class LexError(ValidationFailure):
    code = "LexError"


class ExpressionSyntaxError(ValidationFailure):
    code = "SyntaxError"


class UnknownIdentifier(ValidationFailure):
    code = "UnknownIdentifier"


class ArityError(ValidationFailure):
    code = "ArityError"


class EvaluationError(NumericalFailure):
    code = "EvaluationError"


# scenario ingestion
class ScenarioParseError(ValidationFailure):
    code = "ParseError"


class SchemaError(ValidationFailure):
    code = "SchemaError"


class ScenarioValidationError(ValidationFailure):
    code = "ValidationError"
