class StageError(Exception):
    """Base class for all library errors."""


class InvalidArgument(StageError, ValueError):
    pass


class DegenerateInput(StageError, ValueError):
    pass


class EvaluationError(StageError, ArithmeticError):
    pass


class ParseError(StageError):
    """Raised by binary decoders; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergenceError(StageError):
    def __init__(self, client, epoch, message="loss is not finite"):
        super().__init__(f"client {client}, epoch {epoch}: {message}")
        self.client = client
        self.epoch = epoch


class UndefinedMetric(StageError, ValueError):
    pass
