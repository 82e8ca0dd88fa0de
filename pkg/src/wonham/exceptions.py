"""Exception types raised across the package."""


class WonhamError(Exception):
    """Base class for every error raised by this package."""


class ModelValidationError(WonhamError, ValueError):
    """A model violates one or more invariants.

    ``violations`` holds every ``(code, message)`` pair found, not only the
    one that determined the exception class.
    """

    code = "InvalidModel"

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [(self.code, violations)]
        self.violations = list(violations)
        lines = "; ".join(f"{code}: {msg}" for code, msg in self.violations)
        super().__init__(lines)

    @property
    def codes(self):
        return [code for code, _ in self.violations]


class NegativeOffDiagonal(ModelValidationError):
    code = "NegativeOffDiagonal"


class RowSumNonZero(ModelValidationError):
    code = "RowSumNonZero"


class NonPositiveR(ModelValidationError):
    code = "NonPositiveR"


class NonFiniteValue(ModelValidationError):
    code = "NonFinite"


class DimensionMismatch(ModelValidationError):
    code = "DimensionMismatch"


class TransientStatesPresent(WonhamError, ValueError):
    def __init__(self, states):
        self.states = tuple(states)
        super().__init__(
            f"states {list(self.states)} belong to non-closed communicating classes"
        )


class NumericalRankFailure(WonhamError, ArithmeticError):
    pass


class WeightCountMismatch(WonhamError, ValueError):
    pass


class InternalEquivalenceViolation(WonhamError, AssertionError):
    pass


class GridMismatch(WonhamError, ValueError):
    pass


class DegenerateLikelihood(WonhamError, FloatingPointError):
    pass


class AbsoluteContinuityViolation(WonhamError, ValueError):
    pass


class NotInvariantPrior(WonhamError, ValueError):
    pass


class ModelIsStabilizable(WonhamError, ValueError):
    pass


class SingleClassModelWarning(UserWarning):
    pass


_BY_CODE = {
    cls.code: cls
    for cls in (NegativeOffDiagonal, RowSumNonZero, NonPositiveR, NonFiniteValue, DimensionMismatch)
}


def raise_violations(violations):
    """Raise the exception class of the first violation, carrying all of them."""
    code = violations[0][0]
    raise _BY_CODE.get(code, ModelValidationError)(violations)
