"""Exception hierarchy. `exit_code` is what the CLI exits with."""


class CimtError(Exception):
    exit_code = 1


class NumericalError(CimtError):
    exit_code = 1


class GradCheckFailure(CimtError):
    exit_code = 1


class ConfigError(CimtError):
    exit_code = 2


class ShapeError(ConfigError):
    pass


class DataError(ConfigError):
    pass


class UndefinedMetric(DataError):
    pass


class StatisticsError(CimtError):
    exit_code = 2


class StorageError(CimtError):
    exit_code = 3


class TrainingDiverged(CimtError):
    exit_code = 4


class CheckpointMismatch(CimtError):
    exit_code = 5


class PairingError(CimtError):
    exit_code = 6
