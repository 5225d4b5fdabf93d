"""Dataset descriptors and training configuration."""

import dataclasses
from dataclasses import dataclass

from advlab.core.errors import ConfigError


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    num_classes: int
    shape: tuple  # (channels, height, width)
    split_sizes: tuple  # (train, validation, test)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}", "dataset.num_classes")
        if len(self.shape) != 3 or any(int(s) <= 0 for s in self.shape):
            raise ConfigError(f"shape dims must be positive, got {self.shape}", "dataset.shape")
        if len(self.split_sizes) != 3 or any(int(s) <= 0 for s in self.split_sizes):
            raise ConfigError(f"split sizes must be positive, got {self.split_sizes}", "dataset.split_sizes")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "split_sizes", tuple(int(s) for s in self.split_sizes))

    def to_dict(self):
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "shape": list(self.shape),
            "split_sizes": list(self.split_sizes),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], int(d["num_classes"]), tuple(d["shape"]), tuple(d["split_sizes"]))


# validation/test are carved out of each set's official 10k test file
MNIST = DatasetDescriptor("mnist", 10, (1, 28, 28), (60000, 3000, 7000))
CIFAR10 = DatasetDescriptor("cifar10", 10, (3, 32, 32), (50000, 3000, 7000))

DESCRIPTORS = {d.name: d for d in (MNIST, CIFAR10)}


def get_descriptor(name):
    try:
        return DESCRIPTORS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {sorted(DESCRIPTORS)}", "dataset.name")


OPTIMIZERS = ("adam",)


@dataclass
class TrainConfig:
    """Hyperparameters for the target, denoiser and restorer training loops.

    ``epochs_id``/``epochs_fr``/``learning_rate`` default to the values used
    for the denoiser and restorer; ``epochs_target``/``lr_target`` only drive
    the (plumbing) training of the target classifier.
    """

    epochs_id: int = 100
    epochs_fr: int = 80
    learning_rate: float = 0.01
    batch_size: int = 128
    seed: int = 0
    optimizer: str = "adam"
    epochs_target: int = 5
    lr_target: float = 1e-3

    def __post_init__(self):
        for name in ("epochs_id", "epochs_fr", "epochs_target"):
            # zero epochs is a legal no-op; negative counts are not
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0", f"train.{name}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0", "train.learning_rate")
        if not self.lr_target > 0:
            raise ConfigError("lr_target must be > 0", "train.lr_target")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1", "train.batch_size")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}", "train.optimizer")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys {sorted(unknown)}", f"train.{sorted(unknown)[0]}")
        return cls(**d)
