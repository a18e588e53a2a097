"""Exception types shared across the library.

The CLI maps these onto exit codes: ConfigError -> 2, BackendError -> 3,
shard validation failures -> 1. Everything else is a plain bug surface.
"""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class AlignmentError(ValueError):
    """Token alignment is malformed (bad index, empty span, duplicate id)."""


class GeometryError(ValueError):
    """A crop, box, or grid falls outside the region it must live in."""


class PlacementError(ValueError):
    """Scene instances could not be placed within the occlusion bound."""


class DegenerateMaskError(ValueError):
    """An operation received an all-zero mask it cannot pool over."""


class EmptyBatchError(ValueError):
    """A batch-level loss was asked to run with no shared instances."""


class ConfigError(ValueError):
    """A config file or flag set failed validation."""


class BackendError(RuntimeError):
    """A generator backend failed or is not wired to a live model."""


class TrainingError(RuntimeError):
    """Toy training diverged (non-finite loss)."""
