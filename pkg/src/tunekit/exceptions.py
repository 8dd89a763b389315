"""Tunekit exception classes."""


class TunekitError(Exception):
    """Base class for all errors raised by tunekit."""


class ShapeError(TunekitError, ValueError):
    """Exception indicating operand shapes that don't conform for a primitive."""


class NonFiniteError(TunekitError, ValueError):
    """Exception indicating a NaN or Inf value in high-precision mode."""


class TapeError(TunekitError, RuntimeError):
    """Exception indicating misuse of the recorded computation graph."""


class ConfigError(TunekitError, ValueError):
    """Exception indicating an invalid configuration value."""


class TargetResolutionError(TunekitError, ValueError):
    """Exception indicating a target pattern that matches no parameter."""


class TunerError(TunekitError, ValueError):
    """Exception indicating an invalid tuner operation (attach, merge, ...)."""


class DatasetError(TunekitError, ValueError):
    """Exception indicating a malformed dataset file or record."""


class TemplateError(TunekitError, ValueError):
    """Exception indicating a record that can't be rendered by a template."""


class SampleTooLongError(TemplateError):
    """Exception indicating an encoded sample exceeding the maximum length."""


class QuantizationError(TunekitError, ValueError):
    """Exception indicating an invalid quantization request."""


class CheckpointError(TunekitError, ValueError):
    """Exception indicating an unreadable or inconsistent checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Exception indicating a checkpoint written by an unsupported format version."""


class ChecksumError(CheckpointError):
    """Exception indicating a payload that doesn't match its stored CRC32."""


class TrainingError(TunekitError, RuntimeError):
    """Exception indicating a training run that can't proceed."""


class UnknownModelError(TunekitError, LookupError):
    """Exception indicating a request for a model / adapter name not being served."""


class QueueFullError(TunekitError, RuntimeError):
    """Exception indicating the model worker's request queue is full."""


class CliValidationError(TunekitError, ValueError):
    """Exception indicating invalid command line arguments."""
