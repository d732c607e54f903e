"""Exception taxonomy shared across the package.

Errors are split by what the caller did wrong: shapes that cannot combine
(DimensionError), a structurally invalid configuration (ConfigurationError),
a violated call contract such as a non-scalar loss (ContractError), bad data
fed to a pure function (InputError), and metrics that are undefined for the
given inputs (UndefinedMetricError).
"""


class EditLabError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EditLabError):
    """Operand shapes cannot be combined by the requested operation."""


class ConfigurationError(EditLabError):
    """A config value is invalid or inconsistent with the rest of the setup."""


class ContractError(EditLabError):
    """A documented precondition of an operation was violated."""


class InputError(EditLabError):
    """Input data is malformed (out-of-range class ids, bad scores, ...)."""


class UndefinedMetricError(EditLabError):
    """The requested metric has no defined value for these inputs."""
