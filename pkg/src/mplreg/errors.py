"""Exception types shared across the package."""


class MplregError(Exception):
    """Base class for all package errors."""


class FormatError(MplregError):
    """File does not look like the format we expect (bad magic, bad header)."""


class UnsupportedDataError(MplregError):
    """File is recognised but uses a feature we do not support."""


class TruncatedFileError(MplregError):
    """Payload shorter than the header promises."""


class GridMismatchError(MplregError):
    """Two objects that must share a grid (dims/spacing/origin) do not."""


class DomainError(MplregError):
    """Input values outside the documented domain (e.g. unnormalised intensities)."""


class DegenerateRangeError(MplregError):
    """Normalisation asked for on a constant volume without a clip range."""


class EmptyRoiError(MplregError):
    """A mask with no voxels above threshold was used to derive a bounding box."""


class ConfigError(MplregError):
    """Invalid configuration value."""


class NonDifferentiableError(MplregError):
    """An analytic gradient was requested for a non-differentiable setting."""


class DivergenceError(MplregError):
    """Optimisation produced a non-finite loss.

    Carries whatever finite state was reached so callers can salvage
    partial results.
    """

    def __init__(self, message, stage=None, partial=None):
        super().__init__(message)
        self.stage = stage
        self.partial = partial


class GenerationError(MplregError):
    """Phantom generation could not satisfy its constraints."""
