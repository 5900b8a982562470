"""Exception types shared across the package."""


class PsInvertError(Exception):
    """Base class for all library errors."""


class DegenerateVector(PsInvertError, ValueError):
    pass


class ForeignVar(PsInvertError, ValueError):
    pass


class NonFinite(PsInvertError, FloatingPointError):
    pass


class ShapeMismatch(PsInvertError, ValueError):
    pass


class BadLadder(PsInvertError, ValueError):
    pass


class SingularG(PsInvertError, ValueError):
    pass


class RankDeficientLights(PsInvertError, ValueError):
    pass


class OutOfRange(PsInvertError, ValueError):
    pass


class MissingGroundTruth(PsInvertError, ValueError):
    pass


class FileFormat(PsInvertError, ValueError):
    pass


class MissingFile(PsInvertError, FileNotFoundError):
    pass


class CountMismatch(PsInvertError, ValueError):
    pass


class BadSpec(PsInvertError, ValueError):
    pass


class EmptyBatch(PsInvertError, ValueError):
    pass


class EmptyMask(PsInvertError, ValueError):
    pass


class TooFewImages(PsInvertError, ValueError):
    pass


class NonFiniteGradient(PsInvertError, FloatingPointError):
    pass


class DegenerateEstimate(PsInvertError, ValueError):
    pass


class ConfigError(PsInvertError, ValueError):
    pass
