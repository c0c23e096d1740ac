"""Fraternal dropout for recurrent language models, at desk scale."""

from .model import LmConfig, LmModel, forward
from .regularizers import RegularizerSpec
from .trainer import RunConfig, train

__all__ = ["LmConfig", "LmModel", "RegularizerSpec", "RunConfig", "forward", "train"]
__version__ = "0.1.0"
