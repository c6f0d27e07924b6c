"""
Exception hierarchy for the simulator.
Every error derives from FedSimError and from the builtin that best describes it,
so callers can catch either the project type or the plain Python one.
"""
from typing import Optional


class FedSimError(Exception):
    """Base class for all simulator errors."""


class DimensionError(FedSimError, ValueError):
    """Vectors or parameters of mismatched length."""


class ModelInputError(FedSimError, ValueError):
    """Invalid model spec or batch (non-finite features, labels out of range, empty batch)."""


class DatasetError(FedSimError, ValueError):
    """Dataset generation or CSV ingestion failed."""


class PartitionError(FedSimError, ValueError):
    """A partitioner cannot satisfy its preconditions."""


class LocalTrainingError(FedSimError, ArithmeticError):
    """Non-finite loss during local training."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (local step {step})")
        self.step = step


class QuantizationError(FedSimError, ValueError):
    """Non-finite input to the quantizer or malformed quantized payload."""

    def __init__(self, message: str, tensor_index: Optional[int] = None):
        if tensor_index is not None:
            message = f"{message} (tensor {tensor_index})"
        super().__init__(message)
        self.tensor_index = tensor_index


class SnapshotError(FedSimError, ValueError):
    """State-table snapshot could not be decoded."""


class UnknownClientError(FedSimError, LookupError):
    """A client id outside [0, N)."""


class StrategyError(FedSimError, ValueError):
    """Incompatible strategy / optimizer / quantization combination."""


class SamplingError(FedSimError, ValueError):
    """Invalid client sampling request."""


class ConfigError(FedSimError, ValueError):
    """Malformed or unknown configuration key."""


class BoundError(FedSimError, ValueError):
    """Invalid convergence-bound parameters."""


class SimulationDivergedError(FedSimError, ArithmeticError):
    """Evaluation loss became non-finite (or exceeded the divergence limit)."""

    def __init__(self, message: str, round: int):
        super().__init__(f"{message} (round {round})")
        self.round = round


class MetricsIOError(FedSimError, OSError):
    """Metrics or summary file could not be written or read."""

    def __init__(self, message: str, path):
        super().__init__(f"{message}: {path}")
        self.path = str(path)
