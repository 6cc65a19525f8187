"""
Error types for the random adaptation lab.

Everything derives from ValueError so tool callers that only catch
ValueError keep working.
"""


class AdaptationError(ValueError):
    """Base class for every domain error raised by the lab."""


class NegativeEntry(AdaptationError):
    pass


class ZeroRow(AdaptationError):
    pass


class OutOfHorizon(AdaptationError):
    pass


class NotErgodicWithinHorizon(AdaptationError):
    pass


class ParamOutOfRange(AdaptationError):
    pass


class GenerationFailed(AdaptationError):
    pass


class DimensionError(AdaptationError):
    pass


class OverlapError(AdaptationError):
    pass


class NonAgreeingTrial(AdaptationError):
    pass


class SingularSystem(AdaptationError):
    pass


class BadSubset(AdaptationError):
    pass


class TooLargeToEnumerate(AdaptationError):
    pass


class DescriptorError(AdaptationError):
    """Malformed chain descriptor or chain file."""


class OracleMismatch(AdaptationError):
    """A closed-form oracle disagrees with its series cross-check."""
