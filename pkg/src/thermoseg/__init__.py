"""Edge-guided semantic segmentation for thermal-like imagery at desk scale."""

from . import config
from .autodiff import Parameter, Tensor, backward, no_grad
from .model import ModelConfig, SegModel, build_model

__version__ = "0.1.0"

__all__ = [
    "config",
    "Parameter",
    "Tensor",
    "backward",
    "no_grad",
    "ModelConfig",
    "SegModel",
    "build_model",
    "__version__",
]
