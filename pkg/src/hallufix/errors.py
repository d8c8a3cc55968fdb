"""Exception hierarchy.

Every error raised on purpose by the package derives from ``HallufixError``.
The CLI maps ``ConfigError`` to exit code 2, ``DataError`` to 3 and
``NumericalError`` to 4.
"""


class HallufixError(Exception):
    pass


class ConfigError(HallufixError):
    pass


class DataError(HallufixError):
    pass


class NumericalError(HallufixError):
    pass


# mesh
class ParseError(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class EmptyMesh(DataError):
    pass


class DegenerateExtent(DataError):
    pass


class SizeLimit(ConfigError):
    pass


class IoError(DataError, OSError):
    pass


# render / losses
class ShapeMismatch(DataError):
    pass


class UnsupportedCount(ConfigError):
    pass


class NoValidPixels(NumericalError):
    pass


class ZeroVector(NumericalError):
    pass


class DegenerateWeights(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message, iteration=None, terms=None):
        super().__init__(message)
        self.iteration = iteration
        self.terms = dict(terms or {})


# orm / metrics
class EmptyDistribution(DataError):
    pass


class TooFewPoints(DataError):
    pass


class ScorerFailure(NumericalError):
    pass


class EmptyCloud(DataError):
    pass
