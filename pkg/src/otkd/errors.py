class OTKDError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(OTKDError, ValueError):
    pass


class EmptyDistributionError(OTKDError, ValueError):
    """A distribution has no mass left to transport."""

    def __init__(self, message, side=None):
        if side is not None:
            message = f"{side}: {message}"
        super().__init__(message)
        self.side = side


class UnsupportedSizeError(OTKDError, ValueError):
    """Instance too large for a dense test oracle."""
