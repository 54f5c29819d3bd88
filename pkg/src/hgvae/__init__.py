import logging

__version__ = "0.1.0"

from .baseline import BaselineVAE  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .config import BaselineConfig, ImputeConfig, ModelConfig, TrainConfig  # noqa: E402
from .data import MotionDataset, SkeletonSpec, load_dataset, synthesize_motions, write_dataset  # noqa: E402
from .imputer import map_impute, occlusion_results  # noqa: E402
from .model import HGVAE  # noqa: E402
from .trainer import TrainLog, train  # noqa: E402

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "HGVAE",
    "BaselineVAE",
    "ModelConfig",
    "BaselineConfig",
    "TrainConfig",
    "ImputeConfig",
    "MotionDataset",
    "SkeletonSpec",
    "TrainLog",
    "load_checkpoint",
    "save_checkpoint",
    "load_dataset",
    "write_dataset",
    "synthesize_motions",
    "train",
    "map_impute",
    "occlusion_results",
]
