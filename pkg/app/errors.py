class TFError(Exception):
    """base of every error raised by the pipeline"""

    pass


class InvalidArgument(TFError, ValueError):
    """raised when an argument violates an operation's precondition"""

    pass


class StateError(TFError, RuntimeError):
    """raised when an object is used in the wrong state, e.g. a consumed tape"""

    pass


class DataError(TFError):
    """raised when an input file is missing or malformed"""

    pass


class PlacementError(DataError):
    """raised when the scene generator cannot place the requested buildings"""

    pass


class CheckpointMismatch(DataError):
    """raised when a checkpoint is loaded against another model config"""

    pass


class NonFiniteLossError(TFError):
    def __init__(self, step: int, losses: dict):
        self.step = step
        self.losses = losses
        super().__init__(f"non-finite loss at step {step}: {losses}")
