"""Embedding-space feature restorer: classified spaces, convex mixing and training.

Embeddings of denoised images are split by whether the frozen classifier
labels them correctly (``p1``) or not (``p2``). The restorer is trained on
same-label convex combinations ``alpha * h_p1 + (1 - alpha) * h_p2`` so that
misclassified embeddings are pulled back while correct ones stay correct.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from advlab.core.errors import ConfigError, DivergenceError
from advlab.core.rng import rng_stream
from advlab.nets import _batches, build_restorer, denoise_batched

log = logging.getLogger(__name__)

SOURCE_CLEAN = 0  # denoised clean image
SOURCE_ADV = 1  # denoised adversarial image
SOURCE_NAMES = {SOURCE_CLEAN: "denoised-clean", SOURCE_ADV: "denoised-AE"}


@dataclass(frozen=True)
class MixCoefficient:
    alpha: float

    def __post_init__(self):
        if not 0.0 <= float(self.alpha) <= 1.0:
            raise ValueError(f"mixing coefficient must lie in [0, 1], got {self.alpha}")


class ClassifiedSpaces:
    """Embeddings partitioned into correctly (p1) and wrongly (p2) classified sets.

    Stored flat; ``p1[y]`` / ``p2[y]`` give per-class embedding arrays indexed
    by the true label.
    """

    def __init__(self, embeddings, labels, predicted, sources, num_classes):
        self.embeddings = np.ascontiguousarray(embeddings, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.predicted = np.asarray(predicted, dtype=np.int64)
        self.sources = np.asarray(sources, dtype=np.int8)
        self.num_classes = num_classes
        self.correct = self.predicted == self.labels

    def __len__(self):
        return len(self.labels)

    def indices(self, space, y):
        mask = self.correct if space == 1 else ~self.correct
        return np.flatnonzero(mask & (self.labels == y))

    @property
    def p1(self):
        return {y: self.embeddings[self.indices(1, y)] for y in range(self.num_classes)}

    @property
    def p2(self):
        return {y: self.embeddings[self.indices(2, y)] for y in range(self.num_classes)}

    @property
    def n_p1(self):
        return int(self.correct.sum())

    @property
    def n_p2(self):
        return int((~self.correct).sum())

    def summary(self):
        return {
            "n": len(self),
            "p1": self.n_p1,
            "p2": self.n_p2,
            "p2_by_source": {SOURCE_NAMES[s]: int(((~self.correct) & (self.sources == s)).sum()) for s in SOURCE_NAMES},
        }


@torch.no_grad()
def embed_batched(target, pixels, batch_size=500):
    target.eval()
    return torch.cat([target.embed(xb) for xb in _batches(pixels, batch_size)])


@torch.no_grad()
def partition_spaces(target, denoiser, clean_examples, adversarial, batch_size=250):
    """Route ``f_enc(denoiser(x))`` of every clean image and AE into p1 or p2.

    ``adversarial`` is anything with ``pixels`` and ``labels`` (an
    AdversarialSet or ExampleSet).
    """
    target.eval()
    parts = []
    for src, (pixels, labels) in ((SOURCE_CLEAN, (clean_examples.pixels, clean_examples.labels)),
                                  (SOURCE_ADV, (adversarial.pixels, adversarial.labels))):
        if len(labels) == 0:
            continue
        h = embed_batched(target, denoise_batched(denoiser, pixels, batch_size), batch_size)
        pred = target.classify(h).argmax(1)
        parts.append((h.numpy(), np.asarray(labels), pred.numpy(), np.full(len(labels), src)))
    spaces = ClassifiedSpaces(*(np.concatenate(p) for p in zip(*parts)), num_classes=target.descriptor.num_classes)
    for y in range(spaces.num_classes):
        if len(spaces.indices(1, y)) == 0:
            warnings.warn(f"class {y} has no correctly classified embeddings; it is excluded from restorer training")
    return spaces


def convex_mix(h_a, h_b, alpha):
    """``alpha * h_a + (1 - alpha) * h_b`` elementwise (numpy arrays or tensors)."""
    if isinstance(alpha, MixCoefficient):
        alpha = alpha.alpha
    if tuple(h_a.shape) != tuple(h_b.shape):
        raise ValueError(f"cannot mix embeddings of shapes {tuple(h_a.shape)} and {tuple(h_b.shape)}")
    if isinstance(alpha, torch.Tensor) and alpha.dim() == 1 and h_a.dim() == 2:
        alpha = alpha[:, None]
    elif isinstance(alpha, np.ndarray) and alpha.ndim == 1 and h_a.ndim == 2:
        alpha = alpha[:, None]
    return alpha * h_a + (1 - alpha) * h_b


def _nested_combination(points, weights):
    """Evaluate sum(w_i * p_i) by peeling the last point and renormalising the rest.

    sum_{i<=k} w_i p_i = S * [sum_{i<k} (w_i / S) p_i] + w_k p_k with S = sum_{i<k} w_i;
    when S == 0 the combination is just p_k.
    """
    if len(points) == 1:
        return points[0].copy()
    head = weights[:-1].sum()
    if head == 0.0:
        return points[-1].copy()
    inner = _nested_combination(points[:-1], weights[:-1] / head)
    return head * inner + weights[-1] * points[-1]


def verify_hull_closure(points, weights, tol=1e-5):
    """Check that a k-point convex combination stays in the hull of its points.

    Compares the direct weighted sum with the nested two-point evaluation and
    tests membership in the per-coordinate [min, max] envelope of ``points``.
    Raises ``ValueError`` if ``weights`` are not a valid simplex vector.
    """
    pts = np.asarray(points, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2 or len(w) != len(pts):
        raise ValueError(f"need >= 2 points and one weight per point, got {pts.shape} and {w.shape}")
    if (w < 0).any() or abs(w.sum() - 1.0) > tol:
        raise ValueError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
    direct = w @ pts
    nested = _nested_combination(pts, w)
    agree = np.all(np.abs(direct - nested) <= tol)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    inside = np.all((nested >= lo - tol) & (nested <= hi + tol)) and np.all((direct >= lo - tol) & (direct <= hi + tol))
    return bool(agree and inside)


def fr_loss(restorer, classifier, mixed, labels):
    """Mean cross-entropy of ``classifier(restorer(mixed))`` against ``labels``."""
    loss = F.cross_entropy(classifier(restorer(mixed)), labels)
    if not torch.isfinite(loss):
        raise DivergenceError(f"restorer loss is {loss.item()} on a batch of {len(labels)}")
    return loss


def sample_pairs(spaces, rng):
    """One epoch of same-label (p1 index, p2 index, alpha) triples.

    Per class, ``max(|p1|, |p2|)`` pairs drawn uniformly with replacement;
    classes without p2 members pair p1 with p1. Alpha is uniform in (0, 1).
    """
    first, second = [], []
    for y in range(spaces.num_classes):
        good, bad = spaces.indices(1, y), spaces.indices(2, y)
        if len(good) == 0:
            continue
        n = max(len(good), len(bad))
        first.append(rng.choice(good, size=n))
        second.append(rng.choice(bad if len(bad) else good, size=n))
    if not first:
        raise ConfigError("every class has an empty p1 space; nothing to train the restorer on", "fr")
    first, second = np.concatenate(first), np.concatenate(second)
    alpha = rng.random(len(first))
    alpha[alpha == 0.0] = np.nextafter(0.0, 1.0)
    return first, second, alpha


@dataclass
class FRTrainState:
    restorer: torch.nn.Module
    config: object
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    alpha_means: list = field(default_factory=list)


@torch.no_grad()
def restored_accuracy(restorer, target, embeddings, labels, batch_size=2048):
    if len(labels) == 0:
        return float("nan")
    restorer.eval()
    h = torch.from_numpy(np.asarray(embeddings, dtype=np.float32))
    pred = torch.cat([target.classify(restorer(h[i:i + batch_size])).argmax(1) for i in range(0, len(h), batch_size)])
    return float((pred.numpy() == np.asarray(labels)).mean())


def train_fr(target, spaces, config, restorer=None):
    """Train a restorer on same-label convex mixtures of p1/p2 embeddings.

    Returns ``(restorer, FRTrainState)``; ``config.epochs_fr == 0`` returns
    the freshly initialised restorer unchanged.
    """
    if restorer is None:
        restorer = build_restorer(target.embedding_dim, seed=config.seed)
    state = FRTrainState(restorer, config)
    if spaces.n_p1 == 0:
        raise ConfigError("every class has an empty p1 space; nothing to train the restorer on", "fr")
    if config.epochs_fr == 0:
        return restorer, state
    target.freeze(True)
    emb = torch.from_numpy(spaces.embeddings)
    lab = torch.from_numpy(spaces.labels)
    opt = torch.optim.Adam(restorer.parameters(), lr=config.learning_rate)
    rng = rng_stream(config.seed, "fr:pairs")
    p1_idx, p2_idx = np.flatnonzero(spaces.correct), np.flatnonzero(~spaces.correct)
    for epoch in range(config.epochs_fr):
        restorer.train()
        first, second, alpha = sample_pairs(spaces, rng)
        order = rng.permutation(len(first))
        state.alpha_means.append(float(alpha.mean()))
        losses = []
        for start in range(0, len(order), config.batch_size):
            sel = order[start:start + config.batch_size]
            a = torch.from_numpy(alpha[sel].astype(np.float32))
            mixed = convex_mix(emb[first[sel]], emb[second[sel]], a)
            # both members share the label by construction
            loss = fr_loss(restorer, target.classify, mixed, lab[first[sel]])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        state.loss_history.extend(losses)
        state.epoch = epoch + 1
        row = {
            "epoch": epoch + 1,
            "loss": float(np.mean(losses)),
            "p1_retention": restored_accuracy(restorer, target, spaces.embeddings[p1_idx], spaces.labels[p1_idx]),
            "p2_recovery": restored_accuracy(restorer, target, spaces.embeddings[p2_idx], spaces.labels[p2_idx]),
        }
        state.epoch_rows.append(row)
        log.info("fr epoch %d/%d loss=%.4f p1_retention=%.4f p2_recovery=%.4f", epoch + 1, config.epochs_fr,
                 row["loss"], row["p1_retention"], row["p2_recovery"])
    restorer.eval()
    return restorer, state
