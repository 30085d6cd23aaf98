class GaildriveError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GaildriveError, ValueError):
    """Shapes, dimensions or settings that do not fit together."""


class StateError(GaildriveError, RuntimeError):
    """An object was used in the wrong lifecycle state."""


class FormatError(GaildriveError, ValueError):
    """A serialized file or byte stream is malformed."""


class CollectionError(GaildriveError, RuntimeError):
    """The scripted expert failed while recording demonstrations."""


class NumericalError(GaildriveError, FloatingPointError):
    """A loss or parameter became non-finite during training."""
