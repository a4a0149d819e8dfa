from .checkpoint import read_checkpoint, write_checkpoint
from .nets import Discriminator, Generator, ProjectionHeads
from .objectives import (
    Models,
    adversarial_loss,
    build_models,
    generator_losses,
    sample_patch_features,
    total_loss,
)
from .optim import Adam, linear_decay_lr
from .train import FeatureExtractor, TrainConfig, TrainingDivergence, frechet_proxy, train, translate

__all__ = [
    "Adam",
    "Discriminator",
    "FeatureExtractor",
    "Generator",
    "Models",
    "ProjectionHeads",
    "TrainConfig",
    "TrainingDivergence",
    "adversarial_loss",
    "build_models",
    "frechet_proxy",
    "generator_losses",
    "linear_decay_lr",
    "read_checkpoint",
    "sample_patch_features",
    "total_loss",
    "train",
    "translate",
    "write_checkpoint",
]
