"""Shared plumbing: datasets, configuration, RNG streams, checkpoints."""

from advlab.core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from advlab.core.config import CIFAR10, MNIST, DatasetDescriptor, TrainConfig, get_descriptor
from advlab.core.datasets import Example, ExampleSet, Splits, load_dataset
from advlab.core.errors import (
    AdvlabError,
    AttackError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigError,
    DatasetError,
    DivergenceError,
    MissingPrerequisiteError,
)
from advlab.core.rng import derived_seed, rng_stream, torch_generator, torch_seeded
