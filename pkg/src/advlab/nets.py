"""Target classifiers, the U-Net input denoiser and the embedding restorer."""

import hashlib
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from advlab.core.config import DatasetDescriptor, TrainConfig
from advlab.core.errors import ConfigError, DivergenceError
from advlab.core.rng import rng_stream, torch_seeded

log = logging.getLogger(__name__)

EMBEDDING_DIM = 512
ARCHS = ("small_cnn", "resnet_mini")


def _conv_bn_relu(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


# -- target models -----------------------------------------------------------


class TargetModel(nn.Module):
    """``f = classifier . encoder`` with the embedding exposed.

    The encoder ends in a ReLU, so embeddings are nonnegative.
    """

    def __init__(self, encoder, classifier, embedding_dim, arch, descriptor):
        super().__init__()
        self.encoder = encoder
        self.classifier = classifier
        self.embedding_dim = embedding_dim
        self.arch = arch
        self.descriptor = descriptor

    def forward(self, x):
        return self.classifier(self.encoder(x))

    def embed(self, x):
        return self.encoder(x)

    def classify(self, h):
        return self.classifier(h)

    @torch.no_grad()
    def predict(self, x):
        return self.forward(x).argmax(dim=1)

    def freeze(self, frozen=True):
        """Freeze parameters and BN statistics (eval mode) for use as a fixed oracle."""
        self.requires_grad_(not frozen)
        self.train(not frozen)
        return self

    def spec(self):
        return {"arch": self.arch, "embedding_dim": self.embedding_dim, "descriptor": self.descriptor.to_dict()}


def _small_cnn_encoder(channels, height, width, embedding_dim):
    plan = [channels, 32, 64, 128, 256]
    layers = []
    h, w = height, width
    for c_in, c_out in zip(plan[:-1], plan[1:]):
        layers += [_conv_bn_relu(c_in, c_out), nn.MaxPool2d(2)]
        h, w = h // 2, w // 2
    if h < 1 or w < 1:
        raise ConfigError(f"input {height}x{width} too small for small_cnn", "target.arch")
    layers += [nn.Flatten(), nn.Linear(plan[-1] * h * w, embedding_dim), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class _BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _resnet_mini_encoder(channels, embedding_dim):
    return nn.Sequential(
        _conv_bn_relu(channels, 32),
        _BasicBlock(32, 32, 1),
        _BasicBlock(32, 64, 2),
        _BasicBlock(64, 128, 2),
        _BasicBlock(128, 256, 2),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(256, embedding_dim),
        nn.ReLU(inplace=True),
    )


def build_target(descriptor, arch="small_cnn", seed=0, embedding_dim=EMBEDDING_DIM):
    """Untrained target model for ``descriptor``; initial weights depend only on ``seed``."""
    if isinstance(descriptor, dict):
        descriptor = DatasetDescriptor.from_dict(descriptor)
    if arch not in ARCHS:
        raise ConfigError(f"unknown arch {arch!r}; expected one of {ARCHS}", "target.arch")
    c, h, w = descriptor.shape
    with torch_seeded(seed, f"init:target:{arch}"):
        if arch == "small_cnn":
            encoder = _small_cnn_encoder(c, h, w, embedding_dim)
        else:
            encoder = _resnet_mini_encoder(c, embedding_dim)
        classifier = nn.Linear(embedding_dim, descriptor.num_classes)
    return TargetModel(encoder, classifier, embedding_dim, arch, descriptor)


def target_from_spec(spec):
    return build_target(DatasetDescriptor.from_dict(spec["descriptor"]), spec["arch"], 0, spec["embedding_dim"])


def parameter_digest(module):
    """SHA-256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _flip_crop(xb, rng, pad=2):
    """Random horizontal flip and ``pad``-pixel translation, driven by ``rng``."""
    n, _, h, w = xb.shape
    flip = torch.from_numpy(rng.random(n) < 0.5)
    xb = torch.where(flip[:, None, None, None], xb.flip(3), xb)
    padded = F.pad(xb, (pad, pad, pad, pad), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def _batches(pixels, batch_size):
    for i in range(0, len(pixels), batch_size):
        chunk = pixels[i:i + batch_size]
        yield chunk if isinstance(chunk, torch.Tensor) else torch.from_numpy(np.array(chunk, dtype=np.float32))


@torch.no_grad()
def batched_logits(model, pixels, batch_size=500):
    model.eval()
    return torch.cat([model(xb) for xb in _batches(pixels, batch_size)])


def accuracy(model, examples, batch_size=500):
    if len(examples) == 0:
        return float("nan")
    pred = batched_logits(model, examples.pixels, batch_size).argmax(1).numpy()
    return float((pred == examples.labels).mean())


def train_target(model, train_set, config, eval_set=None, augment=False, history=None):
    """Fit ``model`` with Adam on cross-entropy. Returns ``(model, metrics)``.

    Per-epoch metric rows are appended to ``history`` when given.
    ``config.epochs_target == 0`` leaves the model untouched.
    """
    if not isinstance(config, TrainConfig):
        raise TypeError("config must be a TrainConfig")
    metrics = {}
    if config.epochs_target == 0:
        if eval_set is not None:
            metrics["clean_accuracy"] = accuracy(model, eval_set)
        return model, metrics
    model.freeze(False)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_target)
    order_rng = rng_stream(config.seed, f"shuffle:target:{model.arch}")
    aug_rng = rng_stream(config.seed, f"augment:target:{model.arch}")
    x_all = torch.from_numpy(np.array(train_set.pixels))
    y_all = torch.from_numpy(np.array(train_set.labels))
    for epoch in range(config.epochs_target):
        model.train()
        order = order_rng.permutation(len(y_all))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            xb, yb = x_all[idx], y_all[idx]
            if augment:
                xb = _flip_crop(xb, aug_rng)
            loss = F.cross_entropy(model(xb), yb)
            if not torch.isfinite(loss):
                raise DivergenceError(f"target loss became {loss.item()} at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        metrics["train_loss"] = total / seen
        msg = f"target[{model.arch}] epoch {epoch + 1}/{config.epochs_target} loss {metrics['train_loss']:.4f}"
        if eval_set is not None:
            metrics["clean_accuracy"] = accuracy(model, eval_set)
            msg += f" acc {metrics['clean_accuracy']:.4f}"
        log.info(msg)
        if history is not None:
            history.append({"epoch": epoch + 1, **metrics})
    model.freeze(True)
    return model, metrics


# -- input denoiser -----------------------------------------------------------

# (input channels, output channels) of the nine conv+BN+ReLU layers at width 1;
# ``None`` marks the image channel count.
_DENOISER_PLAN = [
    (None, 32), (32, 32), (32, 64), (64, 64), (64, 128),
    (192, 192), (192, 64), (96, 96), (96, None),
]


class Denoiser(nn.Module):
    """U-Net image-to-image denoiser.

    Nine 3x3 conv+BN+ReLU layers. Max-pool after layers 2 and 4; nearest
    upsampling before layers 6 and 8. Layer 6 sees ``cat(l3, up(l5))``
    (64 + 128 = 192 channels) and layer 8 sees ``cat(l2, up(l7))``
    (32 + 64 = 96). Output is clamped to [0, 1].

    ``width`` scales every hidden channel count (1.0 is the reference plan).
    """

    def __init__(self, in_channels=3, width=1.0):
        super().__init__()
        self.in_channels = in_channels
        self.width = width

        def ch(c):
            return in_channels if c is None else max(1, int(round(c * width)))

        self.plan = [(ch(a), ch(b)) for a, b in _DENOISER_PLAN]
        c = [b for _, b in self.plan]
        # skip concatenations must reproduce the planned input widths
        self.plan[5] = (c[2] + c[4], self.plan[5][1])
        self.plan[7] = (c[1] + c[6], self.plan[7][1])
        self.layers = nn.ModuleList(_conv_bn_relu(a, b) for a, b in self.plan)

    def forward(self, x):
        return self.trace(x)["output"]

    def trace(self, x, patch=None):
        """Forward pass returning every layer's input and output.

        ``patch`` maps a 1-based layer number to a function applied to that
        layer's output before it propagates (used for instrumented checks).
        """
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"denoiser expects (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        if x.shape[-1] < 4 or x.shape[-2] < 4:
            raise ValueError(f"denoiser input {tuple(x.shape[-2:])} is smaller than 4x4")
        patch = patch or {}
        inputs, outputs = {}, {}

        def run(k, inp):
            inputs[k] = inp
            out = self.layers[k - 1](inp)
            if k in patch:
                out = patch[k](out)
            outputs[k] = out
            return out

        a1 = run(1, x)
        a2 = run(2, a1)
        a3 = run(3, F.max_pool2d(a2, 2))
        a4 = run(4, a3)
        a5 = run(5, F.max_pool2d(a4, 2))
        a6 = run(6, torch.cat([a3, F.interpolate(a5, size=a3.shape[-2:], mode="nearest")], dim=1))
        a7 = run(7, a6)
        a8 = run(8, torch.cat([a2, F.interpolate(a7, size=a2.shape[-2:], mode="nearest")], dim=1))
        a9 = run(9, a8)
        return {"inputs": inputs, "outputs": outputs, "output": a9.clamp(0.0, 1.0)}

    def spec(self):
        return {"in_channels": self.in_channels, "width": self.width}


def build_denoiser(in_channels, seed=0, width=1.0):
    with torch_seeded(seed, "init:denoiser"):
        return Denoiser(in_channels, width)


def forward_denoiser(denoiser, images):
    """Denoise a batch; returns images of identical shape in [0, 1]."""
    if images.dim() != 4 or images.shape[1] != denoiser.in_channels:
        raise ValueError(f"expected (B, {denoiser.in_channels}, H, W) images, got {tuple(images.shape)}")
    return denoiser(images)


@torch.no_grad()
def denoise_batched(denoiser, pixels, batch_size=250):
    denoiser.eval()
    return torch.cat([denoiser(xb) for xb in _batches(pixels, batch_size)])


# -- feature restorer ------------------------------------------------------------


def restorer_widths(dim):
    if dim % 16 or dim <= 0:
        raise ConfigError(f"restorer dimension must be a positive multiple of 16, got {dim}", "fr.embedding_dim")
    return [dim, dim // 2, dim // 4, dim // 16, dim // 4, dim // 2, dim]


class Restorer(nn.Module):
    """Six fully-connected+ReLU layers, widths d, d/2, d/4, d/16, d/4, d/2, d.

    With ``skips`` the mirrored layers are joined U-Net style by addition
    before the activation: layer 1 output into layer 5, layer 2 into layer 4
    and the input into layer 6. Additive joins keep every width unchanged
    and make the untrained map start close to the identity on embeddings.
    """

    def __init__(self, dim=EMBEDDING_DIM, skips=True):
        super().__init__()
        self.dim = dim
        self.skips = skips
        self.widths = restorer_widths(dim)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(self.widths[:-1], self.widths[1:]))

    def forward(self, h):
        a1 = F.relu(self.layers[0](h))
        a2 = F.relu(self.layers[1](a1))
        a3 = F.relu(self.layers[2](a2))
        if not self.skips:
            a4 = F.relu(self.layers[3](a3))
            a5 = F.relu(self.layers[4](a4))
            return F.relu(self.layers[5](a5))
        a4 = F.relu(self.layers[3](a3) + a2)
        a5 = F.relu(self.layers[4](a4) + a1)
        return F.relu(self.layers[5](a5) + h)

    def spec(self):
        return {"dim": self.dim, "skips": self.skips}


def build_restorer(dim=EMBEDDING_DIM, seed=0, skips=True):
    with torch_seeded(seed, "init:restorer"):
        return Restorer(dim, skips)


def forward_restorer(restorer, embeddings):
    if embeddings.dim() != 2 or embeddings.shape[1] != restorer.dim:
        raise ValueError(f"expected (B, {restorer.dim}) embeddings, got {tuple(embeddings.shape)}")
    return restorer(embeddings)
