"""Exception hierarchy shared across the package."""


class VidgeomError(Exception):
    """Base class for all package-specific errors."""


class FormatError(VidgeomError):
    """Raster file is malformed (bad magic, truncated or oversized payload)."""


class SchemaError(VidgeomError):
    """Manifest or spec JSON violates the documented schema."""


class ValidationError(VidgeomError):
    """Data is structurally well-formed but violates a semantic invariant."""


class DomainError(VidgeomError):
    """An argument is outside the mathematical domain of the operation."""


class BehindCameraError(DomainError):
    """A 3D point lies at or behind the camera plane and cannot be projected."""


class ShapeError(VidgeomError):
    """Rasters that must share a resolution do not."""


class MissingInputError(VidgeomError):
    """A required flow or depth input is absent from the clip manifest."""


class SolveError(VidgeomError):
    """A linear system is singular or too ill-conditioned to solve reliably."""


class SpecError(VidgeomError):
    """A generation spec is internally inconsistent (checked by rendering)."""
