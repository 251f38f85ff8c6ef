"""Feedforward-tied energy-based models (ff-EBMs) in numpy.

Feedforward blocks alternate with Hopfield-like energy blocks; gradients
are computed by equilibrium propagation chained backward through the
blocks, or by implicit differentiation as a reference.
"""

from .engines import EngineSettings, compute_gradients
from .model import ModelConfig, build_model, forward_inference, load_checkpoint, predict, save_checkpoint

__version__ = "0.1.0"

__all__ = ["EngineSettings", "ModelConfig", "build_model", "compute_gradients", "forward_inference",
           "load_checkpoint", "predict", "save_checkpoint"]
