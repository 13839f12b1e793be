"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit 2, domain
problems exit 3 and convergence failures exit 4.
"""


class TruncProdError(Exception):
    exit_code = 1


class ConfigError(TruncProdError, ValueError):
    exit_code = 2


class DomainError(TruncProdError, ValueError):
    exit_code = 3


class PoleError(DomainError):
    """Gamma-type function evaluated at a non-positive integer."""


class NoRootError(DomainError):
    pass


class DegenerateError(DomainError):
    pass


class ConvergenceError(TruncProdError, RuntimeError):
    exit_code = 4
