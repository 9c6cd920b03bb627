from safn.core import (
    FUSION_ORDER,
    DataError,
    Modality,
    NumericError,
    Result,
    SafnError,
    ShapeError,
    UsageError,
)
from safn.logging_context import install_structured_logging, log_context
from safn.model import ModelWiring, SafnConfig, SafnParams, forward, backward, predict
from safn.objective import LossConfig
from safn.optim import OptimConfig
from safn.recorder import TrainingRecorder
from safn.training import AblationSpec, CvConfig, run_cv, train_one_fold
from safn.ablations import registry

__all__ = [
    "FUSION_ORDER",
    "Modality",
    "Result",
    "SafnError",
    "DataError",
    "ShapeError",
    "NumericError",
    "UsageError",
    "SafnConfig",
    "ModelWiring",
    "SafnParams",
    "LossConfig",
    "OptimConfig",
    "CvConfig",
    "AblationSpec",
    "forward",
    "backward",
    "predict",
    "train_one_fold",
    "run_cv",
    "registry",
    "install_structured_logging",
    "log_context",
    "TrainingRecorder",
]
