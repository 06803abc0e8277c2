"""Exception types shared across the package."""


class StrudelError(Exception):
    """Base class for all package errors."""


class ConfigError(StrudelError, ValueError):
    """Invalid configuration value."""


class ShapeError(StrudelError, ValueError):
    """Array or tensor shapes do not satisfy an operation's contract."""


class ExhaustionError(StrudelError):
    """A sampling pool cannot supply the requested number of samples."""


class QuarantineError(StrudelError):
    """Target-domain ground truth was read outside of evaluation."""


class RoutingError(StrudelError, ValueError):
    """Uncertainty map supplied or missing for the wrong loss routing."""


class DomainError(StrudelError, ValueError):
    """Value outside its mathematical domain."""


class NonFiniteLossError(StrudelError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, epoch, batch, components, iteration=None):
        self.epoch = epoch
        self.batch = batch
        self.components = dict(components)
        self.iteration = iteration
        where = f"epoch {epoch}, batch {batch}"
        if iteration is not None:
            where = f"iteration {iteration}, " + where
        super().__init__(f"non-finite loss at {where}: {self.components}")


class DegenerateSampleError(StrudelError, ValueError):
    """Statistical test is undefined for the given sample."""


class CheckpointError(StrudelError):
    """Checkpoint file is malformed or has an unsupported format version."""
