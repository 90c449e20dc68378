"""Domain exceptions. All of them derive from a built-in exception so callers can catch either."""


class InvalidArgumentError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


class GeometryMismatchError(ValueError):
    pass


class StabilityError(ValueError):
    """Raised when the CFL ratio v_max*dt/dx exceeds the enforced limit."""

    def __init__(self, ratio: float, limit: float):
        self.ratio = ratio
        self.limit = limit
        super().__init__(f"🚨 Unstable discretization: v_max*dt/dx = {ratio:.4f} exceeds the limit {limit}")


class PropagationDivergedError(ArithmeticError):
    pass


class TrainingDivergedError(RuntimeError):

    def __init__(self, message: str, last_good_checkpoint=None):
        self.last_good_checkpoint = last_good_checkpoint
        super().__init__(message)


class CorpusIOError(OSError):

    def __init__(self, message: str, shard_index=None):
        self.shard_index = shard_index
        super().__init__(message)
