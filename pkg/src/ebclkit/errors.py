class EbclError(Exception):
    """Base class for errors raised by ebclkit."""


class ConfigurationError(EbclError, ValueError):
    """A config value, task name or feature reference is invalid."""


class EventStreamError(EbclError, ValueError):
    """Malformed event-stream input or an inconsistent trajectory."""


class TrainingError(EbclError, RuntimeError):
    """Training diverged or was asked to do something impossible."""


class CheckpointError(EbclError, ValueError):
    """A checkpoint does not match the model it is loaded into."""
