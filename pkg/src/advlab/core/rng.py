"""Deterministic, purpose-separated random streams.

Every stochastic step in the package draws from a stream obtained here, so a
run is fully determined by its seed. Streams for different purposes are
statistically independent (distinct SeedSequence spawn keys).
"""

import contextlib
import zlib

import numpy as np
import torch


def _purpose_key(purpose):
    data = purpose.encode("utf-8")
    # two independent 32-bit words keep collisions between labels negligible
    return (zlib.crc32(data), zlib.adler32(data))


def rng_stream(seed, purpose):
    """Return a numpy Generator for ``(seed, purpose)``.

    The same pair always yields the same sequence; different purposes give
    independent sequences.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=_purpose_key(purpose))
    return np.random.Generator(np.random.PCG64(seq))


def derived_seed(seed, purpose):
    """A 63-bit integer seed drawn from ``rng_stream(seed, purpose)``."""
    return int(rng_stream(seed, purpose).integers(0, 2**63 - 1))


def torch_generator(seed, purpose):
    gen = torch.Generator()
    gen.manual_seed(derived_seed(seed, purpose))
    return gen


@contextlib.contextmanager
def torch_seeded(seed, purpose):
    """Scope torch's global RNG (used by module initialisers) to a stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derived_seed(seed, purpose))
        yield
