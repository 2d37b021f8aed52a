"""Fine-to-coarse multimodal time-series forecasting on a numpy autodiff core."""

from .data import ConfigError, DataError
from .model import FiCoTSModel, ModelConfig

__all__ = ["ConfigError", "DataError", "FiCoTSModel", "ModelConfig"]
__version__ = "0.1.0"
