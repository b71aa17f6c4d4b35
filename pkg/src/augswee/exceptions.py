"""Exception hierarchy shared by the package."""


class AugsweeError(Exception):
    """Base class for all package errors."""


class InvalidPopulationError(AugsweeError, ValueError):
    pass


class CSVFormatError(AugsweeError, ValueError):
    """Raised for malformed sample files; messages carry line numbers."""


class DesignError(AugsweeError, ValueError):
    """Invalid design parameters (certainty units, bad sizes, unknown strata)."""


class RetryBudgetExceeded(DesignError):
    pass


class RootNotBracketedError(AugsweeError, ValueError):
    pass


class SingularMatrixError(AugsweeError, ValueError):
    pass


class ConvergenceError(AugsweeError, RuntimeError):
    pass


class InfeasibleConstraintError(AugsweeError, ValueError):
    pass
