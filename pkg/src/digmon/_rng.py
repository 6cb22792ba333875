"""Seed handling shared by the simulators."""

import numpy as np


def seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, a sequence of ints, None or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def spawn(seed, n: int) -> list:
    return seed_sequence(seed).spawn(n)
