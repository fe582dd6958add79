"""Exception types, grouped by how the command line reports them."""


class MrpError(Exception):
    """Base class for library errors."""


class DataError(MrpError, ValueError):
    """Invalid input data: schema violations, missing columns, bad files."""


class NumericalError(MrpError, ArithmeticError):
    """A fit or sampler failed numerically or did not converge."""


class SeparationError(NumericalError):
    """Logistic fit diverges because a covariate pattern perfectly predicts inclusion."""


class ConvergenceError(NumericalError):
    """An iterative procedure stopped without meeting its tolerance."""
