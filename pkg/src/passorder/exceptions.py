"""Exception hierarchy shared across the package."""


class PassOrderError(Exception):
    """Base class for all errors raised by passorder."""


class ConfigError(PassOrderError):
    """Invalid configuration or malformed catalog file."""


class BudgetExhausted(PassOrderError):
    """A pass-level action was appended with no budget left."""


class IllegalAction(PassOrderError):
    """An action was decoded or stepped while masked out (caller bug)."""


class NoLegalAction(PassOrderError):
    """Action selection was asked to choose from an empty mask."""


class EnvironmentFault(PassOrderError):
    """The backend failed to optimize, compile or run a program."""

    def __init__(self, message, stderr=""):
        super().__init__(message)
        self.stderr = stderr


class MeasurementFault(EnvironmentFault):
    """A benchmark run crashed; ``run_index`` says which one."""

    def __init__(self, message, run_index, stderr=""):
        super().__init__(message, stderr)
        self.run_index = run_index


class BackendTimeout(EnvironmentFault):
    """A backend subprocess exceeded its time limit."""


class NotReady(PassOrderError):
    """Replay memory holds too few experiences to sample."""


class IntegrityError(PassOrderError):
    """Stored IR body no longer hashes to its id, or a record dangles."""


class ProtocolError(PassOrderError):
    """Malformed, unknown or version-incompatible wire message."""


class TrainingDiverged(PassOrderError):
    """Loss became non-finite; ``dump`` holds the offending batch."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
