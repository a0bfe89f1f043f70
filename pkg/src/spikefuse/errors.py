"""Exception types shared across the toolkit."""


class SpikeFuseError(Exception):
    """Base class for every error raised by spikefuse."""


class BoundsError(SpikeFuseError, IndexError):
    pass


class ShapeError(SpikeFuseError, ValueError):
    pass


class DomainError(SpikeFuseError, ValueError):
    pass


class ConfigError(SpikeFuseError, ValueError):
    pass


class UsageError(SpikeFuseError, RuntimeError):
    pass


class NumericError(SpikeFuseError, ArithmeticError):
    """Non-finite value encountered during simulation or training.

    ``layer`` and ``step`` locate the failure when known.
    """

    def __init__(self, message, layer=None, step=None):
        where = []
        if layer is not None:
            where.append(f"layer={layer}")
        if step is not None:
            where.append(f"step={step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.layer = layer
        self.step = step


class TrainingDiverged(NumericError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss!r} in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class ParseError(SpikeFuseError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = int(offset)


class CheckpointError(ParseError):
    def __init__(self, message, offset, layer=None):
        if layer is not None:
            message = f"{message} [{layer}]"
        super().__init__(message, offset)
        self.layer = layer
