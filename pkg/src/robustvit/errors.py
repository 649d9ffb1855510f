"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """A config value or shape contract was violated."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class DatasetError(RuntimeError):
    """A dataset directory or manifest is unusable."""


class StageDependencyError(RuntimeError):
    """A pipeline stage was invoked before its prerequisites."""
