"""Exception types shared across the package."""


class TaskvolError(Exception):
    """Base class for all package-specific failures."""


class SchemaError(TaskvolError):
    """Input violates a declared schema or precondition."""


class IngestionError(TaskvolError):
    """A manifest record or volume file could not be ingested."""


class CenteringError(TaskvolError):
    """Body centering failed (empty soft-tissue mask)."""


class GridShapeError(TaskvolError):
    """Array shapes are inconsistent with the configured grid."""


class UndefinedMetricError(TaskvolError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""


class NumericFault(TaskvolError):
    """Non-finite values appeared where finite ones are required."""


class SelectionError(TaskvolError):
    """Checkpoint selection was asked to choose from an empty record."""
