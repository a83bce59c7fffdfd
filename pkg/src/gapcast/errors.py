"""Exception types shared across the package."""


class GapcastError(Exception):
    """Base class for all gapcast errors."""


class ShapeError(GapcastError):
    """Operand dimensions do not line up."""


class DataError(GapcastError):
    """Malformed or unusable input data."""


class CodecError(DataError):
    """Window encoding or decoding invariant violated."""


class ExampleRejected(DataError):
    """An example cannot be used under the current configuration."""


class UsageError(GapcastError):
    """API or CLI misuse."""


class ProtocolError(GapcastError):
    """Benchmark methods were not run under identical conditions."""


class TrainingDiverged(GapcastError):
    """Loss or gradients became non-finite during training."""


class NondeterministicLoss(GapcastError):
    """A loss function returned different values for two identical calls."""
