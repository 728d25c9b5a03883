"""Exception taxonomy shared across the library.

The CLI maps these onto exit codes: configuration / IO problems exit 2,
numerical failures exit 1.
"""


class SkattnError(Exception):
    """Base class for all library errors."""


class ShapeError(SkattnError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(SkattnError):
    """A configuration value is invalid or inconsistent."""


class NumericsError(SkattnError):
    """A numerical failure: non-finite values or a diverging computation."""


class AutodiffError(SkattnError):
    """Backward pass invoked on an invalid target (non-scalar, detached)."""


class OracleError(SkattnError):
    """A verification oracle cannot be trusted (e.g. non-deterministic loss)."""


class CheckpointError(SkattnError):
    """A checkpoint file is corrupt, truncated, or incompatible."""


class DataError(SkattnError):
    """A dataset file is malformed or inconsistent."""
