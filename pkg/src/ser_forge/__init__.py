"""Speech emotion recognition training stack.

Multi-resolution log-Mel preprocessing, a six-block CNN with efficient
channel attention, weighted focal loss, and stratified cross-validation,
with a CLI for reproducible runs.
"""

__version__ = "0.1.0"

from .autograd import Tensor, backward
from .dsp import AudioSignal, DatasetVersion, LogMelSpectrogram, dataset_version, preprocess_version
from .model import Model, ModelConfig, build_model, eca_preset
from .training import Metrics, TrainConfig, cross_validate, make_folds

__all__ = [
    "AudioSignal",
    "DatasetVersion",
    "LogMelSpectrogram",
    "Metrics",
    "Model",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "__version__",
    "backward",
    "build_model",
    "cross_validate",
    "dataset_version",
    "eca_preset",
    "make_folds",
    "preprocess_version",
]
