"""Exception hierarchy shared by all phaseforge modules."""


class PhaseForgeError(Exception):
    pass


class ConfigError(PhaseForgeError, ValueError):
    pass


class DatasetIOError(PhaseForgeError, OSError):
    pass


class PhaseOutOfRange(PhaseForgeError, ValueError):
    pass


class OutOfRange(PhaseForgeError, ValueError):
    pass


class DimensionMismatch(PhaseForgeError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class OddDimensions(ShapeMismatch):
    pass


class FrequencyOrder(PhaseForgeError, ValueError):
    pass


class FrequencyMismatch(PhaseForgeError, ValueError):
    pass


class TargetOutOfRange(PhaseForgeError, ValueError):
    pass


class EmptyMask(PhaseForgeError, ValueError):
    pass


class DatasetMissingFrequency(PhaseForgeError, KeyError):
    pass


class MissingData(DatasetIOError):
    pass


class MissingCheckpoint(DatasetIOError):
    pass
