"""Seeded, purpose-split random streams.

Each purpose gets its own generator derived from the run seed, so e.g.
changing the number of sampled patches never perturbs weight initialisation.
"""
from __future__ import annotations

import zlib

import numpy as np

PURPOSES = {
    "init": 1,
    "shuffle": 2,
    "patches": 3,
    "dropout": 4,
    "validation": 5,
    "split": 6,
    "eval": 7,
    "pca": 8,
}


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), PURPOSES[purpose], *extra]))


def image_stream(seed: int, purpose: str, image_id: str) -> np.random.Generator:
    """Generator keyed on (seed, purpose, image id); independent of evaluation order."""
    return stream(seed, purpose, zlib.crc32(image_id.encode("utf-8")))
