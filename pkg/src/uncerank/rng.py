"""Named, counter-based random substreams.

Every source of randomness in a run is a Philox generator keyed by a hash
of (root_seed, *labels).  Substreams are independent of the order in which
they are created, so any day / user / component can be regenerated in
isolation and two processes that derive the same labels see identical
streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "stable_bucket", "derive_seed"]


def _digest(payload: bytes, size: int) -> bytes:
    return hashlib.blake2b(payload, digest_size=size).digest()


def substream(root_seed: int, *labels) -> np.random.Generator:
    """Return a generator for the substream named by ``labels``.

    Labels may be ints or strings; they are folded into the Philox key
    together with the root seed.
    """
    material = repr((int(root_seed),) + tuple(labels)).encode("utf-8")
    key = int.from_bytes(_digest(material, 16), "little")
    return np.random.Generator(np.random.Philox(key=key))


def stable_bucket(kind: str, value: int, n_buckets: int) -> int:
    """Deterministic hash of an id into one of ``n_buckets`` buckets."""
    material = f"{kind}:{int(value)}".encode("utf-8")
    return int.from_bytes(_digest(material, 8), "little") % int(n_buckets)


def derive_seed(root_seed: int, *labels) -> int:
    """Fold labels into a fresh 63-bit integer seed."""
    material = repr((int(root_seed),) + tuple(labels)).encode("utf-8")
    return int.from_bytes(_digest(material, 8), "little") >> 1
