"""Exception types raised across the pipeline."""


class PipelineError(Exception):
    """Base class for all lulcseg errors."""


class SingularTransform(PipelineError):
    """Affine transform has a zero-determinant linear part and cannot be inverted."""


class GeometryTypeError(PipelineError):
    """Feature geometry type is not valid for the requested operation."""


class EmptyShape(PipelineError):
    """Target raster has zero rows or columns."""


class UnclosedRing(PipelineError):
    """Polygon ring does not end on its starting point."""


class MissingBand(PipelineError):
    """Raster lacks a band required by the operation."""


class ShapeMismatch(PipelineError):
    """Array shapes do not agree."""


class TransformMismatch(PipelineError):
    """Georeferencing transforms do not agree."""


class RasterSmallerThanChip(PipelineError):
    """Raster extent is smaller than one chip."""


class InvalidClassValue(PipelineError):
    """Label raster contains values outside the class palette."""


class AlignmentError(PipelineError):
    """Rasters are not aligned (transform or extent differs)."""


class EmptyDataset(PipelineError):
    """Dataset contains no records."""


class UnknownArchitecture(PipelineError):
    """Requested model architecture name is not registered."""


class BadSpatialDims(PipelineError):
    """Input height/width is not divisible by the network's downsampling factor."""


class IndexMismatch(PipelineError):
    """Chips do not share the same grid placement."""


class ChipOutOfBounds(PipelineError):
    """Chip extent falls outside the mosaic."""


class DivergedLoss(PipelineError):
    """Training loss became non-finite."""


class SceneTooSmall(PipelineError):
    """Requested synthetic scene is too small to be usable."""


class ConfigValidationError(PipelineError):
    """Experiment configuration failed schema validation."""
