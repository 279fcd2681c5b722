"""Exception hierarchy shared by every module.

Every validation failure derives from :class:`OWSegError` (itself a
``ValueError``) so the CLI can map them to exit code 2 in one place.
"""


class OWSegError(ValueError):
    """Base class for input/validation errors."""


class ShapeMismatch(OWSegError):
    pass


class InconsistentPanoptic(OWSegError):
    pass


class DimMismatch(OWSegError):
    pass


class UnknownClass(OWSegError):
    pass


class EmptyClass(OWSegError):
    pass


class UninitializedClass(OWSegError):
    pass


class ZeroVariance(OWSegError):
    pass


class ZeroNormDescriptor(OWSegError):
    pass


class TooSmall(OWSegError):
    pass


class EmptyBank(OWSegError):
    pass


class DegenerateLabels(OWSegError):
    pass


class MissingPrediction(OWSegError):
    pass


class OverlappingRegions(OWSegError):
    pass


class TooLarge(OWSegError):
    pass


class BadMagic(OWSegError):
    pass


class DepthUnsupported(OWSegError):
    pass


class TruncatedFile(OWSegError):
    pass


class NonFinite(OWSegError):
    pass


class ManifestError(OWSegError):
    pass


class EmptyGroundTruthWarning(UserWarning):
    """Raised (as a warning) when a loss is evaluated against an empty mask."""
