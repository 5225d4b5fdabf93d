"""Exception hierarchy shared across advlab."""


class AdvlabError(Exception):
    """Base class for all package errors."""


class ConfigError(AdvlabError, ValueError):
    """Invalid configuration. ``field`` is the dotted path of the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class MissingPrerequisiteError(AdvlabError, FileNotFoundError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class DatasetError(AdvlabError):
    """A dataset record failed validation."""


class CheckpointIntegrityError(AdvlabError):
    """File truncated or its checksum does not match."""


class CheckpointVersionError(AdvlabError):
    """File was written by an incompatible format version."""


class DivergenceError(AdvlabError, FloatingPointError):
    """Training produced a non-finite loss."""


class AttackError(AdvlabError):
    """Attack gradient was non-finite."""
