"""Distilling meaning and context representations from a frozen masked language model."""

from .distiller import DistillerConfig, DistillerModel, load_checkpoint, save_checkpoint
from .provider import FileProvider, ToyMLM, ToyMLMConfig

__version__ = "0.1.0"

__all__ = ["DistillerConfig", "DistillerModel", "FileProvider", "ToyMLM", "ToyMLMConfig",
           "load_checkpoint", "save_checkpoint"]
