"""Exception types shared across the package."""


class FlowAdaptError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FlowAdaptError):
    """Operands have incompatible shapes."""

    def __init__(self, op, shape_a, shape_b=None):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = None if shape_b is None else tuple(shape_b)
        if shape_b is None:
            msg = f"{op}: invalid shape {self.shape_a}"
        else:
            msg = f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}"
        super().__init__(msg)


class NonFiniteError(FlowAdaptError):
    """An operation produced NaN or Inf values."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"{op}: non-finite values produced"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(FlowAdaptError):
    """Backward pass requested on an unusable graph (non-scalar or detached loss)."""


class DataFormatError(FlowAdaptError):
    """A dataset file is malformed."""

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ConfigError(FlowAdaptError):
    """Configuration is invalid; carries every offending key at once."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


class CheckpointError(FlowAdaptError):
    """Checkpoint file is malformed, truncated, or fails its hash check."""


class TrainingDiverged(FlowAdaptError):
    """A training loss became non-finite."""

    def __init__(self, phase, epoch, batch):
        self.phase = phase
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{phase}: non-finite loss at epoch {epoch}, batch {batch}")
