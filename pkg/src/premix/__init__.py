"""Pre-training, mixing augmentation and active learning for MIL slide aggregators."""

from premix.aggregator import ArchConfig, AggregatorParams, MixConfig, MixSpec, init_params
from premix.bagio import FeatureBag, PaddedBatch, SynthSpec, load_bag, pad_batch, save_bag
from premix.config import RunConfig, load_config
from premix.losses import LossWeights, cross_entropy_mixed, original_loss, total_pretrain_loss

__all__ = [
    "AggregatorParams",
    "ArchConfig",
    "FeatureBag",
    "LossWeights",
    "MixConfig",
    "MixSpec",
    "PaddedBatch",
    "RunConfig",
    "SynthSpec",
    "cross_entropy_mixed",
    "init_params",
    "load_bag",
    "load_config",
    "original_loss",
    "pad_batch",
    "save_bag",
    "total_pretrain_loss",
]

__version__ = "0.1.0"
