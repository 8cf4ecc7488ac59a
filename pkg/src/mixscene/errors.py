"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigurationError/UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class MixsceneError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MixsceneError):
    """Invalid configuration, roster, or artifact combination."""


class ShapeMismatchError(MixsceneError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, *shapes) -> None:
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class DegenerateVectorError(MixsceneError):
    """Vector norm at or below the normalization floor (collapsed embedding)."""


class ContractViolationError(MixsceneError):
    """A documented precondition was violated by the caller."""


class DataError(MixsceneError):
    """Dataset contents violate an invariant or are missing."""


class StratificationError(DataError):
    """A combination has too few tuples to appear in every split."""


class FormatError(MixsceneError):
    """On-disk artifact has a bad magic, version, or is truncated."""


class EvaluationError(MixsceneError):
    """Metric computation received an unusable input."""


class NumericError(MixsceneError):
    """A numeric result left the finite domain (NaN/Inf)."""


class OracleFailureError(NumericError):
    """The finite-difference oracle could not evaluate the function."""
