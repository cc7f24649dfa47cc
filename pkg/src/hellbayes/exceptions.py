"""Exception hierarchy.

Configuration problems derive from :class:`ConfigError` and numerical
problems from :class:`NumericalError`; the CLI maps them to exit codes 1
and 2 respectively.
"""


class HellbayesError(Exception):
    """Base class for all package errors."""


class ConfigError(HellbayesError, ValueError):
    """Invalid user input: bad options, files or config keys."""


class NumericalError(HellbayesError, ArithmeticError):
    """A computation could not be carried out reliably."""


class ParameterDomainError(ConfigError):
    """A parameter vector lies outside its family's bounds."""


class DensityContractError(NumericalError):
    """A density evaluator returned negative or non-finite values."""


class GridRangeError(NumericalError):
    """Too much probability mass falls outside the quadrature range."""
