"""Exception types raised across the package."""


class ULandError(Exception):
    """Base class for all package errors."""


class ConfigError(ULandError, ValueError):
    pass


class GenerationError(ULandError):
    pass


class FormatError(ULandError):
    """Malformed corpus, weights or stats file."""


class CalibrationError(ULandError):
    pass


class TrainingError(ULandError):
    pass


class ChecksumMismatchError(ULandError):
    """Calibration stats were computed for a different set of weights."""


class UndefinedMetricError(ULandError, ValueError):
    pass
