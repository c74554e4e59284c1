"""Exception hierarchy shared across the package."""


class SphereFMError(Exception):
    """Base class for all package errors."""


class ConfigError(SphereFMError, ValueError):
    pass


class ShapeMismatch(SphereFMError, ValueError):
    pass


class ZeroPatch(SphereFMError, ValueError):
    pass


class AntipodalPatch(SphereFMError, ValueError):
    """Raised when two patches are (numerically) antipodal and the geodesic is not unique."""


class NotTangent(SphereFMError, ValueError):
    pass


class BaseMismatch(SphereFMError, ValueError):
    pass


class OutOfRange(SphereFMError, ValueError):
    pass


class UnknownClass(SphereFMError, ValueError):
    pass


class EmptyBatch(SphereFMError, ValueError):
    pass


class EmptyDataset(SphereFMError, ValueError):
    pass


class TooFewSamples(SphereFMError, ValueError):
    pass


class NonFinite(SphereFMError, FloatingPointError):
    pass


class FormatVersionMismatch(SphereFMError, IOError):
    pass


class ChecksumMismatch(SphereFMError, IOError):
    pass


class PluggableUnavailable(SphereFMError, NotImplementedError):
    """A loss term that needs a pretrained network (LPIPS, adversarial) was evaluated."""
