"""Prime-kernel convolutional speech enhancement toolkit."""

from .tensor import Tensor
from .conv import ConvSpec, conv1d, conv2d
from .spectral import SpectroConfig, Spectrogram, stft, istft
from .blocks import EnhancementModel, ModelConfig, enhance
from .config import default_run_config, tiny_run_config, load as load_config

__all__ = [
    "Tensor", "ConvSpec", "conv1d", "conv2d",
    "SpectroConfig", "Spectrogram", "stft", "istft",
    "EnhancementModel", "ModelConfig", "enhance",
    "default_run_config", "tiny_run_config", "load_config",
]
__version__ = "0.1.0"
