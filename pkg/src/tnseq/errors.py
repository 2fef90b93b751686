"""Exception types raised across the package."""


class TnseqError(Exception):
    """Base class for all package errors."""


class DimensionError(TnseqError, ValueError):
    """Tensor extents do not agree."""


class ArgumentError(TnseqError, ValueError):
    """Malformed or inconsistent argument."""


class DegenerateStateError(TnseqError, ArithmeticError):
    """A postselection (or readout) produced a state of zero norm.

    ``box`` is the index of the offending box inside its scheme and ``item``
    the batch position, when known.
    """

    def __init__(self, message, box=None, item=None):
        super().__init__(message)
        self.box = box
        self.item = item


class ContractionSizeError(TnseqError, MemoryError):
    """A network's contraction would need an intermediate tensor above the size limit."""


class ParseError(TnseqError, ValueError):
    """Malformed parse-tree text."""


class DataError(TnseqError, ValueError):
    """Malformed dataset row; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(TnseqError, ValueError):
    """Unreadable or incompatible checkpoint."""
