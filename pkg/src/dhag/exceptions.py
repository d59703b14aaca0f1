"""Exception hierarchy shared across the package."""


class DhagError(Exception):
    """Base class for all package errors."""


class DimensionError(DhagError, ValueError):
    pass


class LabelError(DhagError, ValueError):
    pass


class ConfigError(DhagError, ValueError):
    pass


class NonFiniteError(DhagError, FloatingPointError):
    """A NaN or infinity reached a graph boundary (input, loss, or backward root)."""


class StateError(DhagError, RuntimeError):
    pass


class DataError(DhagError, ValueError):
    pass


class CheckpointError(DhagError, ValueError):
    pass


class MetricError(DhagError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class AggregateError(DhagError, RuntimeError):
    def __init__(self, seed, cause):
        super().__init__(f"run with seed {seed} failed: {cause}")
        self.seed = seed
        self.cause = cause
