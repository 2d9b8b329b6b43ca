"""Exception types shared across the package."""


class SdfBlendError(Exception):
    """Base class for package-specific failures."""


class SceneError(SdfBlendError):
    """Invalid scene description (bad parameters, tree, or bounds)."""


class SamplingError(SdfBlendError):
    """A sampling routine could not satisfy its contract."""


class CheckpointError(SdfBlendError):
    """Unreadable or wrong-version checkpoint / config file."""


class GridError(SdfBlendError):
    """Invalid surfacing grid specification."""

class FieldError(SdfBlendError):
    """Invalid basis-field state (degenerate rotation, bad shapes)."""
