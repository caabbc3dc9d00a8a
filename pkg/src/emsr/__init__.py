"""Edge-attention super-resolution for electron-microscopy images, in numpy."""

from .autodiff import Tensor, backward
from .net import EmsrConfig, EmsrModel, forward, forward_shared

__all__ = ["EmsrConfig", "EmsrModel", "Tensor", "backward", "forward", "forward_shared"]
__version__ = "0.1.0"
