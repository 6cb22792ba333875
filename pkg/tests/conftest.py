import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def chain_windows(name: str, n_windows: int, seed: int, n_average: int = 1):
    """PSD windows of a catalog scenario through the full simulated hardware."""
    from digmon.chain import simulate_power
    from digmon.scenario import get_scenario
    from digmon.spectral.psd import WINDOW_SECONDS, psd_windows

    p = simulate_power(get_scenario(name), n_windows * n_average * WINDOW_SECONDS, seed=seed)
    return tuple(psd_windows(p, n_average=n_average))


@pytest.fixture(scope="session")
def windows():
    return chain_windows


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
