"""Exception hierarchy shared by all modules.

The command line maps ``DomainError`` to exit code 1 and
``NumericalError`` to exit code 2.
"""


class FlurlabError(Exception):
    """Base class. ``code`` is the machine-readable tag printed by the CLI."""

    code = "error"


class DomainError(FlurlabError, ValueError):
    code = "domain_error"


class NumericalError(FlurlabError, ArithmeticError):
    code = "numerical_failure"


class ConvergenceError(NumericalError):
    code = "no_convergence"


class CholeskyError(NumericalError):
    code = "cholesky_failure"


class IdentifiabilityError(NumericalError):
    """Raised when the knot cannot be identified from the data or the model."""

    code = "not_identifiable"


class RankDeficiencyError(NumericalError):
    code = "rank_deficient"
