"""Exception taxonomy shared across the package.

Contract and domain violations map to CLI exit code 2, numeric failures
(including ODE integration aborts) to exit code 3.
"""


class InterpFlowError(Exception):
    """Base class for all package errors."""


class ContractError(InterpFlowError):
    """A call violated an interface contract (shape/dimension mismatch, bad field)."""


class DomainError(InterpFlowError):
    """An argument lies outside its valid domain (t outside [0,1], empty batch)."""


class ConfigError(InterpFlowError):
    """A run configuration is malformed (unknown key, missing section, bad value)."""


class NumericError(InterpFlowError):
    """A computation produced or received non-finite values."""


class IntegrationError(NumericError):
    """Adaptive ODE integration failed.

    Attributes
    ----------
    last_time : float
        Last successfully accepted integration time.
    worst_index : int or None
        Batch index with the largest scaled error at failure, when known.
    """

    def __init__(self, message, last_time=None, worst_index=None):
        super().__init__(message)
        self.last_time = last_time
        self.worst_index = worst_index


class EndOfEpoch(InterpFlowError):
    """Raised by epoch-mode dataset samplers when the current pass is exhausted."""
