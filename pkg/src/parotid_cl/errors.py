"""Exception hierarchy shared by all modules."""


class ParotidCLError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ParotidCLError, ValueError):
    pass


class DataError(ParotidCLError):
    pass


class SplitError(DataError):
    pass


class DimensionError(ParotidCLError, ValueError):
    pass


class TransferError(ParotidCLError):
    """Parameter name/tag sets do not line up between two parameter containers."""


class PolicyError(TransferError):
    pass


class CheckpointLoadError(ParotidCLError):
    """Checkpoint written with an unsupported schema version."""


class IntegrityError(CheckpointLoadError):
    """Checkpoint archive is corrupt or a blob fails its checksum."""


class ScheduleError(ConfigError):
    pass


class TrainingError(ParotidCLError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
