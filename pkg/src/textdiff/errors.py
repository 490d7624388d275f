"""Exception types raised across the package.

Every contract violation maps to a named exception so callers (and tests)
can distinguish failure modes without parsing messages.
"""


class TextdiffError(Exception):
    """Base class for all package errors."""


class ConfigError(TextdiffError, ValueError):
    """Invalid configuration value or combination."""


class ShapeMismatchError(TextdiffError, ValueError):
    """Tensor shapes disagree with the operation's contract."""


class StepRangeError(TextdiffError, ValueError):
    """Diffusion step index outside [1, T]."""


class UnknownBlockError(TextdiffError, ValueError):
    """Requested block index is not in the decoder registry."""


class EmptyDatasetError(TextdiffError, ValueError):
    """Training or evaluation requested on an empty dataset."""


class EmptyTextError(TextdiffError, ValueError):
    """Text annotation is empty after trimming."""


class DownsampleError(TextdiffError, ValueError):
    """Bilinear upsampling asked to shrink a map."""


class IncompleteFeatureSetError(TextdiffError, ValueError):
    """Feature assembly requested before all maps are present."""


class MissingScaleParamsError(TextdiffError, ValueError):
    """Fusion invoked on a scale without attention parameters."""


class RangeViolationError(TextdiffError, ValueError):
    """Probability input outside [0, 1]."""


class FrozenViolationError(TextdiffError, RuntimeError):
    """A frozen parameter changed during segmentation training."""


class UnknownVariantError(TextdiffError, ValueError):
    """Variant name outside {full, zeta1, zeta2}."""


class SelectionMismatchError(TextdiffError, ValueError):
    """Evaluation selection differs from the one used in training."""


class MissingMetricsError(TextdiffError, FileNotFoundError):
    """Run directory lacks a metrics.csv for report aggregation."""


class DataError(TextdiffError, ValueError):
    """Dataset folder violates the expected layout."""


class MissingMaskError(DataError):
    """Image has no matching mask file."""


class MissingTextError(DataError):
    """Image has no row in texts.csv."""


class UnreadableFileError(DataError):
    """Image or mask file exists but cannot be decoded."""


class PlacementError(TextdiffError, ValueError):
    """Synthetic shapes cannot be placed at the requested resolution."""


class SplitSizeError(TextdiffError, ValueError):
    """Requested train split size is not smaller than the dataset."""
