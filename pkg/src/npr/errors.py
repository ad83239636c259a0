"""Exception types raised across the rendering engine."""


class NprError(Exception):
    """Base class for all engine errors."""


class NonPositiveDepth(NprError, ValueError):
    pass


class PixelOutOfBounds(NprError, ValueError):
    pass


class BehindCamera(NprError, ValueError):
    pass


class ZeroQuaternion(NprError, ValueError):
    pass


class DimensionMismatch(NprError, ValueError):
    pass


# The nets and losses modules use these names for the same condition.
DimMismatch = DimensionMismatch
ShapeMismatch = DimensionMismatch


class MissingFeatures(NprError, ValueError):
    pass


class EmptyCloud(NprError, ValueError):
    pass


class WeightsNotLoaded(NprError, RuntimeError):
    pass


class CountMismatch(NprError, ValueError):
    pass


class TooSmall(NprError, ValueError):
    pass


class ZeroVector(NprError, ValueError):
    pass


class BadDistribution(NprError, ValueError):
    pass


class WrongViewCount(NprError, ValueError):
    pass


class AllNodesMasked(NprError, ValueError):
    pass


class InvalidSpec(NprError, ValueError):
    pass


class FormatError(NprError, OSError):
    """Problems decoding one of the binary file formats."""


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class CorruptLength(FormatError):
    pass
