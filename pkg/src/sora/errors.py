"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to.
"""


class SoraError(Exception):
    exit_code = 2


class ConfigError(SoraError, ValueError):
    """Invalid configuration (bad extents, out-of-range hyperparameters)."""

    exit_code = 1


class ContractError(SoraError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class DimensionError(ContractError):
    pass


class DegenerateVectorError(ContractError):
    """A vector norm fell below the cosine-similarity floor."""


class StageOrderError(SoraError):
    """A pipeline stage ran before the artifact it depends on existed."""

    exit_code = 2


class ConfigHashMismatch(SoraError):
    exit_code = 2


class NumericalError(SoraError, ArithmeticError):
    """Non-finite loss or gradient during training."""

    exit_code = 3
