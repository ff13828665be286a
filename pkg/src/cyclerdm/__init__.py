"""Three-stage conditional diffusion image restoration with Haar-wavelet calibration."""

from .errors import CycleRDMError, NumericalError, OrderingError, ParameterError, ShapeError
from .pipeline import PipelineConfig, StageOutputs, TrainState, fit, init_state, restore, train_step

__version__ = "0.1.0"

__all__ = [
    "CycleRDMError",
    "NumericalError",
    "OrderingError",
    "ParameterError",
    "ShapeError",
    "PipelineConfig",
    "StageOutputs",
    "TrainState",
    "fit",
    "init_state",
    "restore",
    "train_step",
]
