"""Multi-round Gaussian perturbation of clean images (the enhanced clean pool)."""

from dataclasses import dataclass, field

import numpy as np

from advlab.core.datasets import ExampleSet
from advlab.core.errors import ConfigError


@dataclass(frozen=True)
class AugmentConfig:
    rounds: int = 3
    sigmas: tuple = field(default=(0.01, 0.03, 0.05))
    include_original: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if self.rounds < 1:
            raise ConfigError("augment.rounds must be >= 1", "augment.rounds")
        if len(self.sigmas) != self.rounds:
            raise ConfigError(f"augment.sigmas has {len(self.sigmas)} entries for {self.rounds} rounds", "augment.sigmas")
        if any(s < 0 for s in self.sigmas):
            raise ConfigError("augment.sigmas must be >= 0", "augment.sigmas")

    def to_dict(self):
        return {"rounds": self.rounds, "sigmas": list(self.sigmas), "include_original": self.include_original}


def gaussian_enhance(examples, config, rng):
    """Stack ``[x] + [clamp(x + N(0, s^2), 0, 1) for s in sigmas]``; labels are copied."""
    blocks, labels, indices = [], [], []
    if config.include_original:
        blocks.append(examples.pixels)
        labels.append(examples.labels)
        indices.append(examples.indices)
    for sigma in config.sigmas:
        noise = rng.standard_normal(examples.pixels.shape, dtype=np.float32) * np.float32(sigma)
        blocks.append(np.clip(examples.pixels + noise, 0.0, 1.0))
        labels.append(examples.labels)
        indices.append(examples.indices)
    return ExampleSet(np.concatenate(blocks), np.concatenate(labels), examples.descriptor, np.concatenate(indices))
