"""Quantization-aware, distilled LSTM students for multi-label audio event
detection, with the supporting feature, metric and accounting code."""

from ._accel import backend_name
from .errors import QdaedError
from .lstm import Student, forward_batch, init_student, predict_proba
from .quantization import Quantizer, fake_quantize
from .trainer import QuantMode, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "QdaedError",
    "QuantMode",
    "Quantizer",
    "Student",
    "TrainConfig",
    "backend_name",
    "fake_quantize",
    "forward_batch",
    "init_student",
    "predict_proba",
    "train",
]
