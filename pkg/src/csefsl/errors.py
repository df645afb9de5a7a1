"""Exception hierarchy shared by all simulator modules."""


class CseFslError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(CseFslError, ValueError):
    """A layer stack, architecture or run configuration is malformed."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class InternalConsistencyError(CseFslError, RuntimeError):
    """A forward cache was used with a stack or parameters it was not built from."""


class DataError(CseFslError, ValueError):
    """Input data does not satisfy a contract (labels, shapes, sizes)."""


class FormatError(DataError):
    """A binary dataset file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PlanError(CseFslError, ValueError):
    """A partition plan cannot be realised on the given dataset."""


class ProtocolError(CseFslError, RuntimeError):
    """Client and server disagree on a payload or model shape."""


class TrainingAborted(CseFslError, RuntimeError):
    """A non-finite gradient or parameter was produced."""


class SchedulerError(CseFslError, RuntimeError):
    """The discrete-event engine reached an impossible state."""


class DeadlockError(SchedulerError):
    """No events remain but the run has not completed."""
