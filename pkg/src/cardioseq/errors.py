"""Exception taxonomy shared by all modules.

The CLI maps these onto its exit codes: configuration, data, checkpoint and
shape problems exit with 2, numeric aborts (NaN/Inf) with 3, verification
failures with 1.
"""


class CardioseqError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CardioseqError):
    """Tensor shapes or dimensions do not satisfy an operation's contract."""


class UnsupportedKernelError(CardioseqError):
    """Convolution kernel geometry is not supported (even-sized kernels)."""


class NumericError(CardioseqError):
    """A forward operation produced NaN/Inf, or a gradient went non-finite."""


class TapeError(CardioseqError):
    """A tensor is detached from any tape where a taped tensor was required."""


class ContractError(CardioseqError):
    """API misuse: non-scalar loss, repeated backward, non-deterministic
    forward during a gradient check, invalid mode strings, and similar."""


class ConfigError(CardioseqError):
    """Invalid or inconsistent configuration (file or programmatic)."""


class DataError(CardioseqError):
    """Manifest or image data cannot be read or fails validation."""


class CheckpointError(CardioseqError):
    """Checkpoint file is malformed, truncated, or inconsistent with its
    embedded model configuration."""
