"""Exception hierarchy.

Each family maps onto one CLI exit code: configuration problems exit with 2,
data problems with 3 and transport problems with 4.
"""


class SparseSplitError(Exception):
    """Base class for every error raised by this package."""


# configuration / model shape (exit code 2)

class ConfigError(SparseSplitError, ValueError):
    pass


class NonIntegralInDegree(ConfigError):
    pass


class DegreeOutOfRange(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class LabelOutOfRange(ConfigError):
    pass


class BadRange(ConfigError):
    pass


class BadSplitIndex(ConfigError):
    pass


class CheckpointError(ConfigError):
    pass


# dataset ingestion (exit code 3)

class DataError(SparseSplitError):
    pass


class BadMagic(DataError):
    pass


class CountMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class BadDimensions(DataError):
    pass


class TargetTooSmall(DataError, ValueError):
    pass


# wire protocol and transport (exit code 4)

class TransportError(SparseSplitError):
    pass


class FrameError(TransportError, ValueError):
    """A byte string that is not a valid frame."""


class BadFrameMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class UnknownMessageType(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


class Truncated(FrameError):
    pass


class RemoteError(TransportError):
    """The remote tail answered with an error frame."""


class ConnectionLost(TransportError):
    """The link to the remote tail dropped mid-pass.

    ``resume_at`` is the index (within the dataset pass) of the first sample
    without a decision; pass it back as ``start`` to continue the run.
    """

    def __init__(self, message, resume_at, metrics=None, log=None):
        super().__init__(message)
        self.resume_at = resume_at
        self.metrics = metrics
        self.log = log
