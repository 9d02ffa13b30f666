"""Exception hierarchy.

Every error maps onto one of three CLI exit codes: configuration problems (2),
data problems (3) and numerical failures (4).
"""


class BodaError(Exception):
    exit_code = 1


class ConfigError(BodaError):
    exit_code = 2


class InvalidSpec(ConfigError):
    pass


class InvalidDims(ConfigError):
    pass


class DataError(BodaError):
    exit_code = 3


class ParseError(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class EmptyDataset(DataError):
    pass


class TooFewSamples(DataError):
    pass


class SingleDomain(DataError):
    pass


class UnknownDomain(DataError):
    pass


class ClassMismatch(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class MissingCovariance(DataError):
    pass


class NumericError(BodaError):
    exit_code = 4


class NotPositiveDefinite(NumericError):
    pass


class NonFiniteValue(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class DivergedLoss(NumericError):
    pass
