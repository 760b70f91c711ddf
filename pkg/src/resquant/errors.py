"""Exception hierarchy shared across the toolkit.

Input problems derive from ``ValueError`` (the CLI maps them to exit code 2);
broken internal invariants derive from ``InvariantError`` (exit code 3).
"""


class ShapeError(ValueError):
    """A tensor or input does not have the shape a layer or network expects."""


class StructureError(ValueError):
    """The layer sequence cannot be processed (e.g. an unfoldable BatchNorm)."""


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations.

    ``last`` carries the final estimate so callers can decide whether it is
    good enough.
    """

    def __init__(self, message, last):
        super().__init__(message)
        self.last = last


class InvariantError(RuntimeError):
    """An internal consistency check failed. This is a bug, not bad input."""


class ContainerError(ValueError):
    """Base class for model container problems."""


class MissingBlobError(ContainerError):
    pass


class BlobShapeError(ContainerError):
    pass


class UnknownLayerError(ContainerError):
    pass


class FormatVersionError(ContainerError):
    pass
