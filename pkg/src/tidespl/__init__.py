"""Time-dependent sequential VAE for spike-count data (content/style latents,
contrastive training) with synthetic benchmarks and evaluation protocols."""

from .model import ModelConfig, TiDeSPLVAE, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = ["ModelConfig", "TiDeSPLVAE", "TrainConfig", "load_checkpoint", "save_checkpoint", "train"]
__version__ = "0.1.0"
