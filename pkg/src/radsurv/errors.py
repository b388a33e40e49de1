"""Exception types raised by the pipeline.

All domain errors derive from :class:`PipelineError` so callers (and the CLI)
can distinguish expected failure modes from genuine bugs.
"""


class PipelineError(Exception):
    """Base class for all typed pipeline errors."""


class FormatError(PipelineError):
    """A file is not in one of the supported on-disk formats."""


class DataError(PipelineError):
    """File content or array values violate a data contract (NaN, bad label...)."""


class ArgumentError(PipelineError, ValueError):
    """An argument violates an operation's precondition."""


class EmptyRoiError(PipelineError):
    """A region of interest contains no foreground voxels.

    This is the defined failure path for masks that vanish under erosion;
    extraction is impossible and the patient is excluded downstream.
    """


class DegenerateTextureError(PipelineError):
    """Texture matrices cannot be built (e.g. a single-voxel ROI has no
    neighbour pairs in any direction)."""


class CohortError(PipelineError):
    """A cohort is unusable (empty after exclusions, misaligned ids...)."""


class NoEventsError(PipelineError):
    """Survival data contains no observed events; the partial likelihood
    is empty."""


class UndefinedCindexError(PipelineError):
    """No comparable pairs exist, so the concordance index is undefined."""


class FoldError(PipelineError):
    """A cross-validation fold ended up without any events."""
