"""BiLSTM pooling lab.

A numpy-only laboratory for BiLSTM text classifiers with five pooling heads
(last state, mean, max, Luong attention, max-attention), a small reverse-mode
autodiff engine underneath, and two diagnostics: per-position gradient-norm
profiles with the vanishing ratio, and occlusion-based Normalized Word
Importance.
"""

from .pooling import PoolingKind
from .training import ClassifierModel, TrainConfig, train

__version__ = "0.1.0"

__all__ = ["ClassifierModel", "PoolingKind", "TrainConfig", "train", "__version__"]
