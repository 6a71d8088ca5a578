"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`HCSCError`;
the CLI prints ``error: <ClassName>: <message>`` for these and exits nonzero.
"""


class HCSCError(Exception):
    """Base class for all package errors."""


class ShapeError(HCSCError, ValueError):
    """Incompatible tensor shapes."""


class ConfigError(HCSCError, ValueError):
    """Invalid model or run configuration."""


class DivergenceError(HCSCError, ArithmeticError):
    """An iterative solver produced a non-finite objective."""

    def __init__(self, message, iteration=None, step=None, layer=None):
        super().__init__(message)
        self.iteration = iteration
        self.step = step
        self.layer = layer


class DegenerateAtomError(HCSCError, ValueError):
    """A dictionary atom has zero norm and cannot be projected."""

    def __init__(self, message, channel):
        super().__init__(message)
        self.channel = channel


class EmptyBatchError(HCSCError, ValueError):
    pass


class DataFormatError(HCSCError, ValueError):
    """Base class for malformed input files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class DimensionMismatchError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


class SizeMismatchError(DataFormatError):
    pass
