from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config, smoke_config
from .inference import Enhancer, MetricsReport, enhance, evaluate
from .losses import content_loss, diffusion_loss, total_loss
from .train import train

__all__ = [
    "Checkpoint", "Enhancer", "MetricsReport", "TrainConfig", "content_loss", "diffusion_loss",
    "enhance", "evaluate", "load_checkpoint", "load_config", "save_checkpoint", "smoke_config",
    "total_loss", "train",
]
