"""L-infinity bounded attacks: FGSM, BIM and an iterative CW-style margin attack.

All attacks take a batch ``x`` of images in [0, 1] with labels ``y`` and any
module mapping images to logits. Budgets ``eps`` are in normalised pixel
units; use :func:`normalize_epsilon` to convert from the 0-255 scale.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from advlab.core import container
from advlab.core.config import DatasetDescriptor
from advlab.core.datasets import Example
from advlab.core.errors import AttackError, ConfigError

log = logging.getLogger(__name__)

METHODS = ("fgsm", "bim", "cw")
REPORT_NAMES = {"fgsm": "fgsm", "bim": "bim", "cw": "cw_linf"}
_ALIASES = {"cw_linf": "cw"}


def normalize_epsilon(epsilon_255):
    """Convert a budget on the 0-255 pixel scale to [0, 1] units."""
    if not epsilon_255 > 0:
        raise ConfigError(f"epsilon_255 must be > 0, got {epsilon_255}", "attacks.epsilon_255")
    return float(epsilon_255) / 255.0


@dataclass(frozen=True)
class AttackConfig:
    method: str
    epsilon_255: float
    iterations: int = None  # default: 1 for fgsm, 20 otherwise
    step_size: float = 0.03
    confidence_margin: float = 0.0

    def __post_init__(self):
        method = _ALIASES.get(self.method, self.method)
        if method not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}; expected one of {METHODS}", "attacks.method")
        object.__setattr__(self, "method", method)
        if self.iterations is None:
            object.__setattr__(self, "iterations", 1 if method == "fgsm" else 20)
        if not self.epsilon_255 > 0:
            raise ConfigError("epsilon_255 must be > 0", "attacks.epsilon_255")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1", "attacks.iterations")
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0", "attacks.step_size")
        if self.confidence_margin < 0:
            raise ConfigError("confidence_margin must be >= 0", "attacks.confidence_margin")

    @property
    def epsilon(self):
        return normalize_epsilon(self.epsilon_255)

    @property
    def report_name(self):
        return REPORT_NAMES[self.method]


def parse_attack_spec(spec, **overrides):
    """``"fgsm:4,8,16"`` -> three :class:`AttackConfig` objects."""
    try:
        method, eps_list = spec.split(":")
        epsilons = [float(e) for e in eps_list.split(",") if e.strip()]
    except ValueError:
        raise ConfigError(f"attack spec {spec!r} is not of the form method:eps[,eps...]", "attacks") from None
    if not epsilons:
        raise ConfigError(f"attack spec {spec!r} lists no epsilon", "attacks")
    return [AttackConfig(method.strip(), e, **overrides) for e in epsilons]


# -- primitives ------------------------------------------------------------------


def margin_loss(logits, y, margin=0.0):
    """Per-example ``max(z_y - max_{j != y} z_j, -margin)``."""
    true = logits.gather(1, y[:, None]).squeeze(1)
    others = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf"))
    return torch.clamp(true - others.max(dim=1).values, min=-margin)


def _input_grad(model, x, y, loss_fn):
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        logits = model(x)
        per_example = loss_fn(logits, y)
        (grad,) = torch.autograd.grad(per_example.sum(), x)
    finite = torch.isfinite(grad.flatten(1)).all(dim=1)
    if not bool(finite.all()):
        bad = int(torch.nonzero(~finite)[0])
        err = AttackError(f"non-finite input gradient for batch element {bad} (loss={float(per_example[bad].detach())})")
        err.index = bad
        raise err
    return grad, per_example.detach()


def _ce(logits, y):
    return F.cross_entropy(logits, y, reduction="none")


def _project(x_adv, x, eps):
    return torch.max(torch.min(x_adv, x + eps), x - eps).clamp(0.0, 1.0)


def fgsm(model, x, y, eps):
    """``clamp(x + eps * sign(grad_x CE), 0, 1)``; zero gradients leave pixels unchanged."""
    if eps < 0:
        raise ConfigError("eps must be >= 0", "attacks.epsilon")
    grad, _ = _input_grad(model, x, y, _ce)
    return (x + eps * grad.sign()).clamp(0.0, 1.0).detach()


def bim(model, x, y, eps, iterations=20, step=0.03):
    """Iterated signed-gradient ascent on CE with projection onto the eps-ball."""
    if eps < 0:
        raise ConfigError("eps must be >= 0", "attacks.epsilon")
    x_adv = x.detach().clone()
    for _ in range(iterations):
        grad, _ = _input_grad(model, x_adv, y, _ce)
        x_adv = _project(x_adv + step * grad.sign(), x, eps).detach()
    return x_adv


def cw_linf(model, x, y, eps, iterations=20, step=0.03, margin=0.0):
    """Signed-gradient descent on :func:`margin_loss` inside the eps-ball.

    Returns, per example, the iterate (including the start point) with the
    lowest margin; ties keep the earliest.
    """
    if eps < 0:
        raise ConfigError("eps must be >= 0", "attacks.epsilon")
    x_adv = x.detach().clone()
    best = x_adv.clone()
    best_margin = torch.full((len(x),), float("inf"))
    loss_fn = lambda logits, yy: margin_loss(logits, yy, margin)  # noqa: E731
    for t in range(iterations + 1):
        grad, m = _input_grad(model, x_adv, y, loss_fn)
        better = m < best_margin
        best = torch.where(better[:, None, None, None], x_adv, best)
        best_margin = torch.where(better, m, best_margin)
        if t == iterations:
            break
        x_adv = _project(x_adv - step * grad.sign(), x, eps).detach()
    return best


def run_attack(model, x, y, config):
    eps = config.epsilon
    if config.method == "fgsm":
        return fgsm(model, x, y, eps)
    if config.method == "bim":
        return bim(model, x, y, eps, config.iterations, config.step_size)
    return cw_linf(model, x, y, eps, config.iterations, config.step_size, config.confidence_margin)


# -- attack sets -------------------------------------------------------------------


@dataclass(frozen=True)
class AdversarialExample:
    pixels: np.ndarray
    source: Example
    label: int
    epsilon: float
    method: str


class AdversarialSet:
    """Adversarial images paired with their clean sources and true labels."""

    def __init__(self, pixels, labels, epsilon, method, source=None, source_indices=None,
                 epsilon_255=None, seed=0, source_digest=None):
        self.pixels = np.ascontiguousarray(pixels, dtype=np.float32)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.epsilon = float(epsilon)
        self.epsilon_255 = epsilon_255
        self.method = method
        self.source = source
        self.source_indices = (
            np.arange(len(self.labels)) if source_indices is None else np.asarray(source_indices, dtype=np.int64)
        )
        self.seed = seed
        self.source_digest = source_digest if source_digest is not None else (source.digest() if source is not None else None)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        src = self.source[i] if self.source is not None else None
        return AdversarialExample(self.pixels[i], src, int(self.labels[i]), self.epsilon, self.method)

    def linf_distance(self):
        if self.source is None:
            raise ValueError("attack set has no attached source examples")
        return np.abs(self.pixels - self.source.pixels).reshape(len(self), -1).max(axis=1)


def generate_attack_set(model, examples, config, batch_size=250, seed=0):
    """One adversarial example per input; labels copied from the sources."""
    if len(examples) == 0:
        raise ConfigError("cannot attack an empty example set", "attacks")
    was_training = model.training
    model.eval()
    out = np.empty_like(examples.pixels)
    try:
        for start in range(0, len(examples), batch_size):
            xb = torch.from_numpy(np.array(examples.pixels[start:start + batch_size]))
            yb = torch.from_numpy(np.array(examples.labels[start:start + batch_size]))
            try:
                out[start:start + len(yb)] = run_attack(model, xb, yb, config).numpy()
            except AttackError as exc:
                index = start + getattr(exc, "index", 0)
                raise AttackError(f"{config.report_name} failed on example {index}: {exc}") from exc
    finally:
        model.train(was_training)
    return AdversarialSet(out, examples.labels, config.epsilon, config.report_name, source=examples,
                          source_indices=examples.indices, epsilon_255=config.epsilon_255, seed=seed)


MAGIC = b"ADVSET\x00\x00"
FORMAT_VERSION = 1


def save_attack_set(aset, path):
    header = {
        "method": aset.method,
        "epsilon": aset.epsilon,
        "epsilon_255": aset.epsilon_255,
        "seed": aset.seed,
        "source_digest": aset.source_digest,
        "descriptor": aset.source.descriptor.to_dict() if aset.source is not None else None,
    }
    arrays = {"pixels": aset.pixels, "labels": aset.labels, "source_indices": aset.source_indices}
    with open(path, "wb") as fh:
        fh.write(container.encode(MAGIC, FORMAT_VERSION, header, arrays))


def load_attack_set(path, source=None):
    """Read an ``.advset`` file; ``source`` (the clean ExampleSet) is optional."""
    with open(path, "rb") as fh:
        header, arrays = container.decode(fh.read(), MAGIC, FORMAT_VERSION, what=f"attack set {path}")
    if source is not None and header["source_digest"] is not None and source.digest() != header["source_digest"]:
        raise ValueError(f"{path}: source examples do not match the recorded digest")
    aset = AdversarialSet(arrays["pixels"], arrays["labels"], header["epsilon"], header["method"], source=source,
                          source_indices=arrays["source_indices"], epsilon_255=header["epsilon_255"],
                          seed=header["seed"], source_digest=header["source_digest"])
    aset.descriptor = DatasetDescriptor.from_dict(header["descriptor"]) if header["descriptor"] else None
    return aset
