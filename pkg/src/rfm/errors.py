"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
UnsupportedModeError -> 4.
"""


class RfmError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RfmError, ValueError):
    pass


class DimensionError(RfmError, ValueError):
    pass


class StateError(RfmError, RuntimeError):
    pass


class NumericError(RfmError, ArithmeticError):
    pass


class SingularityError(NumericError):
    pass


class TrainingError(NumericError):
    pass


class IntegrationError(NumericError):
    pass


class DegenerateTargetError(NumericError):
    pass


class UnsupportedModeError(RfmError, NotImplementedError):
    pass
