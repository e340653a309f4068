"""Exception types shared across the package."""


class GraphCapError(Exception):
    """Base class for all package errors."""


class ShapeError(GraphCapError):
    """Operands do not conform (contract violation, caller bug)."""


class NumericError(GraphCapError):
    """An operation produced a NaN or Inf."""


class InvalidGraphError(GraphCapError):
    """A scene graph violates its structural invariants."""


class NoRelationshipsError(GraphCapError):
    """Raised by subgraph sampling when the source graph has no
    relationship nodes; callers fall back to single-object graphs."""
