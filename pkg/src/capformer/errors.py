"""Exception hierarchy shared by every capformer module.

The CLI maps these onto process exit codes, so each class carries one.
"""


class CapformerError(Exception):
    exit_code = 1


class ConfigError(CapformerError, ValueError):
    """Invalid configuration or violated precondition on user parameters."""

    exit_code = 1


class ContractError(CapformerError, ValueError):
    """A caller broke an operation's documented contract."""

    exit_code = 1


class ShapeError(ContractError):
    """Operand shapes are not conformable."""


class DataError(CapformerError, ValueError):
    """Input data is present but unusable (ragged, too short, out of order)."""

    exit_code = 2


class FormatError(DataError):
    """Input file does not follow the expected schema."""


class CheckpointError(ConfigError):
    """Checkpoint is unreadable or incompatible with the requested run."""


class NumericError(CapformerError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""

    exit_code = 3
