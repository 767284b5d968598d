"""Exception hierarchy shared by all fedsel modules.

Each class carries the CLI exit code it maps to.
"""


class FedSelError(Exception):
    exit_code = 3


class ConfigError(FedSelError, ValueError):
    """Invalid configuration, partition spec, or hyperparameter."""

    exit_code = 2


class UsageError(FedSelError, ValueError):
    """A call violated an operation's precondition."""


class ShapeError(FedSelError, ValueError):
    pass


class NumericError(FedSelError, ArithmeticError):
    pass


class StateError(FedSelError, RuntimeError):
    pass


class IngestionError(FedSelError, ValueError):
    exit_code = 2
