"""Training of the input denoiser through a frozen target classifier.

The adversarial pool is built once up front from the training images; every
epoch then sweeps the shuffled union of that pool and the Gaussian-enhanced
clean pool, minimising cross-entropy of ``target(denoiser(x))``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from advlab.attacks import generate_attack_set
from advlab.augment import AugmentConfig, gaussian_enhance
from advlab.core.datasets import ExampleSet
from advlab.core.errors import ConfigError, DivergenceError
from advlab.core.rng import rng_stream
from advlab.nets import batched_logits, build_denoiser, denoise_batched, parameter_digest

log = logging.getLogger(__name__)


def id_loss(denoiser, target, images, labels):
    """Mean cross-entropy of the target's prediction on denoised images."""
    loss = F.cross_entropy(target(denoiser(images)), labels)
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"denoiser loss is {loss.item()} on a batch of {len(labels)} "
            f"(input range [{images.min().item():.3f}, {images.max().item():.3f}])"
        )
    return loss


@dataclass
class IDTrainState:
    denoiser: torch.nn.Module
    frozen_target: torch.nn.Module
    config: object
    epoch: int = 0
    loss_history: list = field(default_factory=list)  # per-batch losses
    epoch_rows: list = field(default_factory=list)  # per-epoch metrics
    source_counts: list = field(default_factory=list)  # (adversarial, clean) samples drawn per epoch
    target_digest_before: str = ""
    target_digest_after: str = ""


def build_adversarial_pool(target, examples, attack_configs, seed, batch_size=250):
    """Attack each example once; examples are dealt round-robin over ``attack_configs``
    after a seeded shuffle, so a mixed-budget pool costs one attack per image."""
    if not attack_configs:
        raise ConfigError("no attack configured for the adversarial training pool", "id.attacks")
    if len(examples) == 0:
        raise ConfigError("adversarial training pool would be empty", "id.n_adversarial")
    order = rng_stream(seed, "id:ae-assignment").permutation(len(examples))
    pixels, labels, indices = [], [], []
    for k, cfg in enumerate(attack_configs):
        part = examples.take(np.sort(order[k::len(attack_configs)]))
        if len(part) == 0:
            continue
        aset = generate_attack_set(target, part, cfg, batch_size=batch_size, seed=seed)
        pixels.append(aset.pixels)
        labels.append(aset.labels)
        indices.append(part.indices)
        log.info("id pool: %d %s eps=%g/255 examples", len(part), cfg.report_name, cfg.epsilon_255)
    return ExampleSet(np.concatenate(pixels), np.concatenate(labels), examples.descriptor, np.concatenate(indices))


@torch.no_grad()
def denoise_and_classify(denoiser, target, images, labels=None, batch_size=250):
    """Predicted labels of ``target(denoiser(images))`` and accuracy (if labels given)."""
    single = np.asarray(images).ndim == 3
    images = np.asarray(images)[None] if single else np.asarray(images)
    target.eval()
    clean = denoise_batched(denoiser, images, batch_size)
    pred = batched_logits(target, clean, batch_size).argmax(1).numpy()
    acc = None if labels is None else float((pred == np.atleast_1d(labels)).mean())
    return (pred[0] if single else pred), acc


def train_id(target, train_examples, attack_configs, augment_config=None, config=None, *,
             clean_examples=None, validation=None, denoiser=None, width=1.0, ae_batch_size=250):
    """Train a denoiser against the frozen ``target``.

    ``train_examples`` are attacked to form the adversarial pool;
    ``clean_examples`` (default: the same images) are Gaussian-enhanced to form
    the clean pool. ``validation`` is an optional ``(pixels, labels)`` pair of
    held-out adversarial images whose denoised accuracy is logged per epoch.
    Returns ``(denoiser, IDTrainState)``.
    """
    augment_config = augment_config or AugmentConfig()
    if not attack_configs:
        raise ConfigError("no attack configured for the adversarial training pool", "id.attacks")
    if len(train_examples) == 0:
        raise ConfigError("adversarial training pool would be empty", "id.n_adversarial")
    if denoiser is None:
        denoiser = build_denoiser(train_examples.descriptor.shape[0], seed=config.seed, width=width)
    target.freeze(True)
    state = IDTrainState(denoiser, target, config, target_digest_before=parameter_digest(target))
    if config.epochs_id == 0:
        state.target_digest_after = state.target_digest_before
        return denoiser, state

    ae_pool = build_adversarial_pool(target, train_examples, attack_configs, config.seed, ae_batch_size)
    clean_src = train_examples if clean_examples is None else clean_examples
    clean_pool = gaussian_enhance(clean_src, augment_config, rng_stream(config.seed, "augment:id"))
    x_all = torch.from_numpy(np.concatenate([ae_pool.pixels, clean_pool.pixels]))
    y_all = torch.from_numpy(np.concatenate([ae_pool.labels, clean_pool.labels]))
    is_adv = np.concatenate([np.ones(len(ae_pool), bool), np.zeros(len(clean_pool), bool)])
    log.info("id training on %d adversarial + %d enhanced clean images", len(ae_pool), len(clean_pool))

    opt = torch.optim.Adam(denoiser.parameters(), lr=config.learning_rate)
    order_rng = rng_stream(config.seed, "shuffle:id")
    for epoch in range(config.epochs_id):
        denoiser.train()
        order = order_rng.permutation(len(y_all))
        state.source_counts.append((int(is_adv[order].sum()), int((~is_adv[order]).sum())))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            loss = id_loss(denoiser, target, x_all[idx], y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        state.loss_history.extend(epoch_losses)
        state.epoch = epoch + 1
        row = {"epoch": epoch + 1, "loss": float(np.mean(epoch_losses))}
        if validation is not None:
            _, row["val_denoised_accuracy"] = denoise_and_classify(denoiser, target, validation[0], validation[1])
        state.epoch_rows.append(row)
        log.info("id epoch %d/%d %s", epoch + 1, config.epochs_id,
                 " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))

    denoiser.eval()
    state.target_digest_after = parameter_digest(target)
    if state.target_digest_after != state.target_digest_before:
        raise RuntimeError("target parameters changed during denoiser training")
    return denoiser, state
