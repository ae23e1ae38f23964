"""Few-shot action recognition on synthetic moving-shape videos.

Instance-aware spatial-temporal attention over a small convolutional backbone,
global-local prototype matching, and a numpy autodiff engine underneath.
"""

from fsar.config import GenerationConfig, TrainConfig, load_config
from fsar.kernels import BACKEND
from fsar.model import FewShotModel, build_model

__all__ = ["BACKEND", "FewShotModel", "GenerationConfig", "TrainConfig", "build_model", "load_config"]
__version__ = "0.1.0"
