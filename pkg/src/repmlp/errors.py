"""Exception types shared across the package."""


class RepMLPError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RepMLPError, ValueError):
    """A tensor or matrix has the wrong shape along some axis."""


class ConfigurationError(RepMLPError, ValueError):
    """A layer, block or network configuration is invalid or unsupported."""


class ParameterError(RepMLPError, ValueError):
    """A parameter value is out of its valid domain (e.g. non-positive sigma)."""


class FormatError(RepMLPError):
    """A checkpoint file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
