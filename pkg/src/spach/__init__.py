"""Dual-path (shifted-window + channel-wise) 3D transformer for PET denoising.

Everything runs on a small numpy-backed reverse-mode autodiff engine
(:mod:`spach.autodiff`); no deep-learning framework is involved.
"""

from .data import PhantomSpec, RoiSpec, Volume, dose_reduce, generate_phantom, read_volume, write_volume
from .metrics import cnr, psnr, ssim
from .model import ModelConfig, build, forward, load_weights, param_count, save_weights
from .train import TrainConfig, TrainState, load_config, parse_config, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "build", "forward", "load_weights", "param_count", "save_weights",
    "PhantomSpec", "RoiSpec", "Volume", "dose_reduce", "generate_phantom", "read_volume", "write_volume",
    "cnr", "psnr", "ssim",
    "TrainConfig", "TrainState", "load_config", "parse_config", "train",
]
