"""Exception types raised across the package."""


class HarqError(Exception):
    """Base class for all package errors."""


class DomainError(HarqError, ValueError):
    """An argument lies outside the domain of a function."""


class ConfigurationError(HarqError, ValueError):
    """Invalid discretization or experiment configuration."""


class ContractViolation(HarqError):
    """A caller broke an interface contract (e.g. a disallowed action)."""


class SolverError(HarqError, RuntimeError):
    """An iterative or linear solve did not reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


class UndefinedConditionalError(HarqError, ZeroDivisionError):
    """A conditional quantity was requested on an event of zero probability."""
