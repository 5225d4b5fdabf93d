import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab.core.config import MNIST
from advlab.core.datasets import (
    ExampleSet,
    fetch_dataset,
    load_dataset,
    read_idx,
    stratified_indices,
    validate_records,
)
from advlab.core.errors import ConfigError, DatasetError
from advlab.core.rng import rng_stream

from conftest import TOY


def _write_idx(path, array, compress=False):
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    payload = header + array.astype(np.uint8).tobytes()
    if compress:
        with gzip.open(str(path) + ".gz", "wb") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


@pytest.mark.parametrize("compress", [False, True])
def test_read_idx_round_trip(tmp_path, compress):
    arr = np.arange(2 * 3 * 4).reshape(2, 3, 4) % 256
    _write_idx(tmp_path / "x-idx3-ubyte", arr, compress)
    assert np.array_equal(read_idx(tmp_path / "x-idx3-ubyte"), arr)


def test_read_idx_truncated(tmp_path):
    arr = np.zeros((2, 2), dtype=np.uint8)
    _write_idx(tmp_path / "t", arr)
    (tmp_path / "t").write_bytes((tmp_path / "t").read_bytes()[:-1])
    with pytest.raises(DatasetError):
        read_idx(tmp_path / "t")


def test_missing_raw_files_point_at_fetch(tmp_path):
    with pytest.raises(FileNotFoundError, match="fetch-data"):
        load_dataset("mnist", data_dir=tmp_path)


def test_validate_records_names_the_record():
    pixels = np.zeros((3, 1, 2, 2), dtype=np.float32)
    pixels[2, 0, 0, 0] = 1.5
    with pytest.raises(DatasetError, match="record 2"):
        validate_records(pixels, np.zeros(3, dtype=np.int64), 10)
    with pytest.raises(DatasetError, match="record 1"):
        validate_records(np.zeros_like(pixels), np.array([0, 10, 0]), 10)


def test_example_set_is_read_only():
    s = ExampleSet(np.zeros((2, *TOY.shape)), [0, 1], TOY)
    with pytest.raises(ValueError):
        s.pixels[0, 0, 0, 0] = 1.0
    assert s[1].label == 1 and len(s.take([1])) == 1


def test_example_set_shape_mismatch():
    with pytest.raises(DatasetError):
        ExampleSet(np.zeros((2, 1, 4, 4)), [0, 1], TOY)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=300), st.floats(0.01, 1.0), st.integers(0, 100))
def test_stratified_counts(labels, fraction, seed):
    labels = np.array(labels)
    idx = stratified_indices(labels, fraction, rng_stream(seed, "t"), 5)
    assert np.all(np.diff(idx) > 0)
    for c in range(5):
        n_c = int((labels == c).sum())
        got = int((labels[idx] == c).sum())
        assert abs(got - fraction * n_c) <= 1 if fraction < 1 else got == n_c


def test_subset_fraction_validated(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load_dataset("mnist", subset_fraction=0.0, data_dir=tmp_path)
    assert exc.value.field == "dataset.subset_fraction"


def test_fetch_rejects_wrong_archive(tmp_path):
    bogus = tmp_path / "a.tgz"
    bogus.write_bytes(b"not the archive")
    with pytest.raises(DatasetError, match="sha256"):
        fetch_dataset("mnist", data_dir=tmp_path, archive=bogus)


@pytest.fixture(scope="module")
def mnist_full(mnist_ready):
    return load_dataset("mnist", 1.0, seed=0)


def test_mnist_split_sizes(mnist_full):
    assert (len(mnist_full.train), len(mnist_full.validation), len(mnist_full.test)) == (60000, 3000, 7000)
    assert mnist_full.train.pixels.dtype == np.float32
    assert 0.0 <= mnist_full.train.pixels.min() and mnist_full.train.pixels.max() <= 1.0
    # validation and test are disjoint pieces of the official test file
    assert not set(mnist_full.validation.indices) & set(mnist_full.test.indices)


def test_mnist_loading_is_deterministic(mnist_full):
    again = load_dataset("mnist", 1.0, seed=0)
    for a, b in zip((mnist_full.train, mnist_full.validation, mnist_full.test),
                    (again.train, again.validation, again.test)):
        assert np.array_equal(a.indices, b.indices)
        assert a.digest() == b.digest()


def test_mnist_tenth_is_stratified(mnist_full):
    sub = load_dataset("mnist", 0.1, seed=0)
    full_counts = mnist_full.train.class_counts()
    counts = sub.train.class_counts()
    # MNIST classes are unbalanced (5421..6742), so the target is 10% of each class
    assert np.all(np.abs(counts - 0.1 * full_counts) <= 1)
    assert np.all(np.abs(counts - 600) <= 80)
    assert len(sub.train) == pytest.approx(6000, abs=10)


def test_cifar_subset_sizes(cifar_ready):
    s = load_dataset("cifar10", 0.2, seed=0)
    assert s.train.descriptor.shape == (3, 32, 32)
    assert len(s.train) == 10000
    assert np.all(s.train.class_counts() == 1000)
    assert len(s.test) + len(s.validation) == pytest.approx(2000, abs=20)
