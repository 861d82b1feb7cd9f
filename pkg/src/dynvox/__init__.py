"""Dynamic radiance fields on time-aware neural voxels, with hand-written gradients."""

from .config import TrainConfig, base_config, small_config, tiny_config
from .model import DynamicField

__all__ = ["DynamicField", "TrainConfig", "base_config", "small_config", "tiny_config"]
__version__ = "0.1.0"
