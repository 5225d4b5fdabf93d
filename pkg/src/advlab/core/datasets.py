"""MNIST / CIFAR-10 loading with seeded, class-stratified subsetting.

Cache layout (root from ``ADVLAB_DATA_DIR``, default ``~/.cache/advlab``)::

    <root>/mnist/train/{train-images-idx3-ubyte,train-labels-idx1-ubyte}[.gz]
    <root>/mnist/test/{t10k-images-idx3-ubyte,t10k-labels-idx1-ubyte}[.gz]
    <root>/cifar10/train/data_batch_{1..5}      (python pickle batches)
    <root>/cifar10/test/test_batch

The official test file of each set is split (seeded) into validation and test
partitions of the sizes given by the descriptor.
"""

import gzip
import io
import logging
import os
import pickle
import struct
import tarfile
import tempfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from advlab.core.config import get_descriptor
from advlab.core.errors import ConfigError, DatasetError
from advlab.core.rng import rng_stream

log = logging.getLogger(__name__)

DATA_ENV = "ADVLAB_DATA_DIR"


def data_root(data_dir=None):
    if data_dir is not None:
        return Path(data_dir)
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "advlab"


@dataclass(frozen=True)
class Example:
    pixels: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: int


class ExampleSet:
    """An immutable batch of examples: ``pixels`` (N, C, H, W) and ``labels`` (N,)."""

    def __init__(self, pixels, labels, descriptor, indices=None):
        pixels = np.ascontiguousarray(pixels, dtype=np.float32)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if pixels.ndim != 4 or pixels.shape[1:] != descriptor.shape:
            raise DatasetError(f"pixel array shape {pixels.shape} does not match {descriptor.name} shape {descriptor.shape}")
        if labels.shape != (pixels.shape[0],):
            raise DatasetError(f"{labels.shape[0]} labels for {pixels.shape[0]} images")
        validate_records(pixels, labels, descriptor.num_classes)
        pixels.setflags(write=False)
        labels.setflags(write=False)
        self.pixels = pixels
        self.labels = labels
        self.descriptor = descriptor
        self.indices = np.arange(len(labels)) if indices is None else np.asarray(indices, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return Example(self.pixels[i], int(self.labels[i]))

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return ExampleSet(self.pixels[idx], self.labels[idx], self.descriptor, self.indices[idx])

    def head(self, n):
        return self.take(np.arange(min(n, len(self))))

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.descriptor.num_classes)

    def digest(self):
        import hashlib

        h = hashlib.sha256()
        h.update(self.pixels.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Splits:
    train: ExampleSet
    validation: ExampleSet
    test: ExampleSet


def validate_records(pixels, labels, num_classes):
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise DatasetError(f"record {int(bad[0])}: label {int(labels[bad[0]])} outside [0, {num_classes})")
    flat = pixels.reshape(len(pixels), -1)
    bad = np.flatnonzero(~np.isfinite(flat).all(axis=1) | (flat.min(axis=1, initial=0.0) < 0) | (flat.max(axis=1, initial=0.0) > 1))
    if bad.size:
        raise DatasetError(f"record {int(bad[0])}: pixel values outside [0, 1]")


# -- raw readers -----------------------------------------------------------


def _open_maybe_gz(path):
    path = Path(path)
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"dataset file missing: {path} (or {gz.name})")


def read_idx(path):
    with _open_maybe_gz(path) as fh:
        data = fh.read()
    if len(data) < 8:
        raise DatasetError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack_from(">HBB", data)
    if zero != 0 or dtype_code != 0x08:
        raise DatasetError(f"{path}: not an unsigned-byte IDX file")
    dims = struct.unpack_from(">" + "I" * ndim, data, 4)
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims))
    if len(data) - offset != expected:
        raise DatasetError(f"{path}: expected {expected} payload bytes for dims {dims}, found {len(data) - offset}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(dims)


def _read_mnist_part(folder, prefix):
    images = read_idx(folder / f"{prefix}-images-idx3-ubyte")
    labels = read_idx(folder / f"{prefix}-labels-idx1-ubyte")
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"{folder}: {images.shape[0]} images but {labels.shape[0]} labels")
    return images[:, None, :, :], labels.astype(np.int64)


def _read_cifar_batch(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset file missing: {path}")
    with open(path, "rb") as fh:
        try:
            batch = pickle.load(fh, encoding="bytes")
        except Exception as exc:
            raise DatasetError(f"{path}: unreadable CIFAR batch ({exc})") from None
    data = np.asarray(batch[b"data"], dtype=np.uint8)
    labels = np.asarray(batch[b"labels"], dtype=np.int64)
    if data.ndim != 2 or data.shape[1] != 3072 or len(labels) != len(data):
        raise DatasetError(f"{path}: malformed CIFAR batch with data shape {data.shape}")
    return data.reshape(-1, 3, 32, 32), labels


def read_raw(name, root):
    """Return ``((train_u8, train_y), (test_u8, test_y))`` for a supported set."""
    base = Path(root) / name
    try:
        if name == "mnist":
            return _read_mnist_part(base / "train", "train"), _read_mnist_part(base / "test", "t10k")
        if name == "cifar10":
            parts = [_read_cifar_batch(base / "train" / f"data_batch_{i}") for i in range(1, 6)]
            train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
            return train, _read_cifar_batch(base / "test" / "test_batch")
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{exc}; run `advlab fetch-data {name}` or set {DATA_ENV}") from None
    raise ConfigError(f"no reader for dataset {name!r}", "dataset.name")


# -- subsetting ------------------------------------------------------------


def stratified_indices(labels, fraction, rng, num_classes):
    """Per class keep ``round(fraction * count)`` examples, chosen by ``rng``.

    Returned indices are sorted, so the original order is preserved.
    """
    if fraction >= 1.0:
        return np.arange(len(labels))
    keep = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        k = int(round(fraction * len(members)))
        if k:
            keep.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)


def load_dataset(descriptor, subset_fraction=1.0, seed=0, data_dir=None):
    """Load train/validation/test collections for ``descriptor``.

    Pixels are scaled to [0, 1] float32. With ``subset_fraction < 1`` each
    split is subsampled per class. Deterministic in ``seed``.
    """
    if isinstance(descriptor, str):
        descriptor = get_descriptor(descriptor)
    if not 0 < subset_fraction <= 1:
        raise ConfigError(f"subset_fraction must be in (0, 1], got {subset_fraction}", "dataset.subset_fraction")
    (train_x, train_y), (test_x, test_y) = read_raw(descriptor.name, data_root(data_dir))
    n_train, n_val, n_test = descriptor.split_sizes
    if len(train_y) != n_train or len(test_y) != n_val + n_test:
        raise DatasetError(
            f"{descriptor.name}: found {len(train_y)}/{len(test_y)} train/test records, "
            f"expected {n_train}/{n_val + n_test}"
        )

    order = rng_stream(seed, f"split:{descriptor.name}").permutation(len(test_y))
    val_idx, test_idx = np.sort(order[:n_val]), np.sort(order[n_val:])

    def build(x_u8, y, idx, purpose):
        sub = stratified_indices(y[idx], subset_fraction, rng_stream(seed, purpose), descriptor.num_classes)
        chosen = idx[sub]
        pixels = x_u8[chosen].astype(np.float32) / np.float32(255.0)
        return ExampleSet(pixels, y[chosen], descriptor, indices=chosen)

    return Splits(
        train=build(train_x, train_y, np.arange(n_train), f"subset:{descriptor.name}:train"),
        validation=build(test_x, test_y, val_idx, f"subset:{descriptor.name}:validation"),
        test=build(test_x, test_y, test_idx, f"subset:{descriptor.name}:test"),
    )


# -- fetching --------------------------------------------------------------
# Pinned npm registry tarballs that redistribute the original data files.
SOURCES = {
    "mnist": {
        "url": "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz",
        "sha256": "8f87f2d0d9133e6c9f7012d6d26bb05409e7e870a1de21d1a600b8d400cc07ed",
    },
    "cifar10": {
        "url": "https://registry.npmjs.org/tfjs-cifar10/-/tfjs-cifar10-1.1.1.tgz",
        "sha256": "141f061ffa2f5e41adf9f7f13f2b40243340f4ea111205187afe18d0f3dbf9fb",
    },
}


def _install_mnist(tar, dest):
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    for split, files in names.items():
        (dest / split).mkdir(parents=True, exist_ok=True)
        for fname in files:
            member = tar.extractfile(f"package/data/{fname}")
            (dest / split / fname).write_bytes(member.read())


def _install_cifar10(tar, dest):
    import json

    from PIL import Image

    def sprite(name):
        # one 32x32 RGB image per 1024-pixel row
        img = Image.open(io.BytesIO(tar.extractfile(f"package/{name}").read())).convert("RGB")
        rows = np.asarray(img, dtype=np.uint8)
        return rows.reshape(-1, 32, 32, 3).transpose(0, 3, 1, 2).reshape(-1, 3072)

    train_labels = json.loads(tar.extractfile("package/train_lables.json").read())
    test_labels = json.loads(tar.extractfile("package/test_lables.json").read())
    (dest / "train").mkdir(parents=True, exist_ok=True)
    (dest / "test").mkdir(parents=True, exist_ok=True)
    for i in range(1, 6):
        batch = {b"data": sprite(f"data_batch_{i}.png"), b"labels": list(train_labels[(i - 1) * 10000:i * 10000])}
        with open(dest / "train" / f"data_batch_{i}", "wb") as fh:
            pickle.dump(batch, fh, protocol=2)
    with open(dest / "test" / "test_batch", "wb") as fh:
        pickle.dump({b"data": sprite("test_batch.png"), b"labels": list(test_labels)}, fh, protocol=2)


def fetch_dataset(name, data_dir=None, archive=None, timeout=120):
    """Populate the cache for ``name`` from its pinned archive.

    ``archive`` may point at an already-downloaded tarball.
    """
    import hashlib

    if name not in SOURCES:
        raise ConfigError(f"unknown dataset {name!r}", "dataset.name")
    src = SOURCES[name]
    dest = data_root(data_dir) / name
    with tempfile.TemporaryDirectory() as tmp:
        if archive is None:
            archive = Path(tmp) / "archive.tgz"
            log.info("downloading %s", src["url"])
            with urllib.request.urlopen(src["url"], timeout=timeout) as resp, open(archive, "wb") as out:
                while chunk := resp.read(1 << 20):
                    out.write(chunk)
        digest = hashlib.sha256(Path(archive).read_bytes()).hexdigest()
        if digest != src["sha256"]:
            raise DatasetError(f"{name} archive sha256 {digest} does not match pinned {src['sha256']}")
        with tarfile.open(archive, "r:gz") as tar:
            (_install_mnist if name == "mnist" else _install_cifar10)(tar, dest)
    return dest


REQUIRED_FILES = {
    "mnist": [
        "train/train-images-idx3-ubyte", "train/train-labels-idx1-ubyte",
        "test/t10k-images-idx3-ubyte", "test/t10k-labels-idx1-ubyte",
    ],
    "cifar10": [f"train/data_batch_{i}" for i in range(1, 6)] + ["test/test_batch"],
}


def dataset_present(name, data_dir=None):
    base = data_root(data_dir) / name
    return all((base / f).exists() or (base / (f + ".gz")).exists() for f in REQUIRED_FILES[name])


def ensure_dataset(name, data_dir=None):
    """Fetch ``name`` into the cache unless its files are already present."""
    if not dataset_present(name, data_dir):
        fetch_dataset(name, data_dir)
