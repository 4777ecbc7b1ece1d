"""Deterministic derivation of named RNG streams from one master seed.

A stream is identified by the master seed plus a tuple of labels.  Labels
are folded into SeedSequence entropy via crc32, so the same
(master, labels) pair yields the same stream on every platform and run,
and any change to the master seed changes every derived stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_entropy(label: str | int) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFF
    return zlib.crc32(label.encode("utf-8"))


def seed_for(master_seed: int, *labels: str | int) -> np.random.SeedSequence:
    """SeedSequence for the stream named by labels under master_seed."""
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_label_entropy(l) for l in labels)
    return np.random.SeedSequence(entropy)


def stream(master_seed: int, *labels: str | int) -> np.random.Generator:
    """Generator for the stream named by labels under master_seed."""
    return np.random.default_rng(seed_for(master_seed, *labels))
