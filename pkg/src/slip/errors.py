"""Exception hierarchy shared across the package.

Each family maps to a distinct CLI exit code (see ``slip.harness.cli``).
"""


class SlipError(Exception):
    """Base class for all package errors."""


class DimensionError(SlipError, ValueError):
    """Incompatible tensor shapes."""


class ContractError(SlipError, RuntimeError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class ConfigError(SlipError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(SlipError, ValueError):
    """Malformed or unusable input data."""


class NumericalError(SlipError, ArithmeticError):
    """Non-finite values encountered during training."""


class ProbeError(NumericalError):
    """A finite-difference probe produced a non-finite value."""


class MappingError(SlipError, KeyError):
    """A parameter path could not be mapped to a layer depth."""


class CheckpointError(SlipError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass
