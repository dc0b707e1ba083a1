"""Exception hierarchy shared by all quantdiff modules."""


class QuantdiffError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(QuantdiffError, ValueError):
    """A caller-supplied argument violates an operation's preconditions."""


class ShapeError(ParameterError):
    """Array shapes are inconsistent with the model or operation."""


class NumericError(QuantdiffError, ArithmeticError):
    """A computation produced NaN or Inf."""


class StateError(QuantdiffError, RuntimeError):
    """An object was used before required initialization/calibration."""


class TrainingError(QuantdiffError, RuntimeError):
    """Training diverged or could not proceed."""


class SamplingError(QuantdiffError, RuntimeError):
    """The reverse-diffusion sampler produced a non-finite state."""


class CalibrationError(QuantdiffError, RuntimeError):
    """Block reconstruction or step-size learning failed."""


class ConfigError(QuantdiffError, ValueError):
    """A run-configuration file is malformed or contains unknown keys."""


class CheckpointError(QuantdiffError, RuntimeError):
    """Base class for checkpoint container load failures."""


class BadMagicError(CheckpointError):
    pass


class UnknownVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class DuplicateTensorError(CheckpointError):
    pass
