"""Mask perturbation, patch sampling, loss, training loop and checkpoints."""

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    InvalidFormatError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .loop import (
    TrainConfig,
    TrainingAborted,
    TrainResult,
    desk_model_config,
    desk_train_config,
    lr_at,
    train,
    train_step,
)
from .loss import LossWeights, sobel, total_loss
from .perturb import PERTURBATIONS, perturb_mask
from .sampling import (
    InMemoryDataset,
    TrainingExample,
    corpus_dataset,
    sample_batch,
    sample_training_example,
    synthetic_dataset,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "InvalidFormatError",
    "TruncatedCheckpointError",
    "UnsupportedVersionError",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "TrainingAborted",
    "TrainResult",
    "desk_model_config",
    "desk_train_config",
    "lr_at",
    "train",
    "train_step",
    "LossWeights",
    "sobel",
    "total_loss",
    "PERTURBATIONS",
    "perturb_mask",
    "InMemoryDataset",
    "TrainingExample",
    "corpus_dataset",
    "sample_batch",
    "sample_training_example",
    "synthetic_dataset",
]
