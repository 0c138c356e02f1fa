"""Shared exception types."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class PpmParseError(ValueError):
    """Malformed PPM input. Carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(ValueError):
    """Checkpoint file is malformed or has the wrong magic/version."""


class ConfigError(ValueError):
    """Bad run configuration: unknown key, bad value, or missing artifact."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""
