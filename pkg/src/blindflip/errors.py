"""Exception types shared across the toolkit."""


class BlindflipError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(BlindflipError):
    """Operand shapes do not conform to an op's shape rule."""


class NonFiniteError(BlindflipError):
    """A NaN or Inf showed up where only finite values are allowed."""


class TapeError(BlindflipError):
    """Misuse of the autodiff tape (non-scalar loss, double backward, off-tape tensor)."""


class StateError(BlindflipError):
    """Operation called before the state it reads exists."""


class ConfigError(BlindflipError):
    """Invalid configuration value; maps to CLI exit code 2."""


class FormatError(BlindflipError):
    """Serialized artifact is not in the expected format (bad magic, bad JSON)."""


class VersionError(BlindflipError):
    """Serialized artifact declares an unsupported format version."""


class TruncationError(BlindflipError):
    """Serialized artifact is shorter than its manifest declares."""


class ChecksumError(BlindflipError):
    """Stored checksum does not match the payload."""


class ConsistencyError(BlindflipError):
    """Manifest fields contradict each other or the reconstructed model."""


class QuantizationError(BlindflipError):
    """Weight tensor cannot be quantized (e.g. all zeros, undefined step size)."""


class StallError(BlindflipError):
    """Bit search found no committable flip."""


class DivergenceError(BlindflipError):
    """An optimization loop produced a non-finite loss; message carries the step index."""


class ReplayError(BlindflipError):
    """Flip trace does not match the model it is being replayed onto."""


class DataError(BlindflipError):
    """Dataset files are missing, truncated, or malformed."""
