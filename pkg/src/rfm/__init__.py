"""Reward-guided flow merging: pretrain small flow models, then merge them by mirror descent."""
from .errors import (ConfigError, DimensionError, NumericError, RfmError, StateError,
                     UnsupportedModeError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DimensionError", "NumericError", "RfmError", "StateError",
           "UnsupportedModeError", "__version__"]
