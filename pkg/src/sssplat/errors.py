"""Exception types shared across the package."""


class SssplatError(Exception):
    """Base class for package errors."""


class BehindCamera(SssplatError):
    """Point has non-positive camera-space depth and cannot be projected."""


class NonPositiveDepth(SssplatError):
    """Back-projection requires a strictly positive depth."""


class ShapeMismatch(SssplatError):
    """Array arguments disagree in shape."""


class DimensionMismatch(SssplatError):
    """Vector dimension does not match the layer it is fed to."""


class StaleTape(SssplatError):
    """Backward called with a tape from a different forward pass."""


class StaleBuffers(SssplatError):
    """Render buffers do not match the scene's current revision."""


class EmptySource(SssplatError):
    """Scene initialization got an empty point source."""


class MissingManifest(SssplatError):
    """Dataset root has no manifest file."""


class CorruptImage(SssplatError):
    """Referenced image file is missing or unreadable."""


class InconsistentResolution(SssplatError):
    """Frame resolution disagrees with its camera or siblings."""


class MissingPose(SssplatError):
    """Augmentation entry references a view with no camera record."""


class OverlappingSplit(SssplatError):
    """Evaluation split intersects the training frames."""


class NumericalError(SssplatError):
    """NaN/Inf appeared in optimized parameters or losses."""
