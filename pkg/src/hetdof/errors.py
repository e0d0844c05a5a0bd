"""Exception hierarchy shared by every module."""


class HetdofError(Exception):
    """Base class for all library errors."""


class InvalidVarianceError(HetdofError, ValueError):
    """A variance function evaluated to a nonpositive or nonfinite value."""


class InvalidWeightsError(HetdofError, ValueError):
    pass


class EstimationError(HetdofError, RuntimeError):
    """A Monte-Carlo or iterative estimate could not be formed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class SchemaMismatchError(HetdofError, ValueError):
    pass


class DimensionError(HetdofError, ValueError):
    pass


class SingularDesignError(HetdofError, ArithmeticError):
    """The (weighted) design is rank deficient.

    Attributes
    ----------
    columns : list
        Labels (names or indices) of the columns judged to be dependent.
    condition : float
        Condition number of the weighted Gram matrix.
    """

    def __init__(self, message, columns=(), condition=float("inf")):
        super().__init__(message)
        self.columns = list(columns)
        self.condition = condition


class DegenerateLeverageError(HetdofError, ArithmeticError):
    """Some case has leverage at (or numerically above) one."""

    def __init__(self, message, cases=()):
        super().__init__(message)
        self.cases = list(cases)


class IncrementUndefinedError(HetdofError, ArithmeticError):
    pass


class ApproximationUndefinedError(HetdofError, ValueError):
    pass


class FoldFailureError(HetdofError, ArithmeticError):
    def __init__(self, message, fold=None):
        super().__init__(message)
        self.fold = fold


class FitError(HetdofError, RuntimeError):
    pass


class ConfigError(HetdofError, ValueError):
    pass
