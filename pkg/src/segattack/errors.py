"""Exception taxonomy shared by the library and the CLI exit codes."""


class SegAttackError(Exception):
    exit_code = 1


class ConfigError(SegAttackError, ValueError):
    exit_code = 2


class ShapeError(SegAttackError, ValueError):
    exit_code = 2


class InvalidInputError(SegAttackError, ValueError):
    exit_code = 4


class AdapterError(SegAttackError):
    exit_code = 3


class LoadError(AdapterError):
    pass


class NumericError(SegAttackError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    pass


class UndefinedMetricError(SegAttackError, ValueError):
    exit_code = 4


class ManifestError(SegAttackError):
    exit_code = 2


class FormatError(ManifestError):
    pass


class GenerationError(SegAttackError):
    exit_code = 4
