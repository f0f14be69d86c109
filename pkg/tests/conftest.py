import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssvep_cstl.signal_core import Dataset, FrequencyTable, StimulusSpec, synthetic_dataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def band_limited(seed: int, n: int = 1000, fs: float = 250.0, f_max: float = 40.0, n_tones: int = 6) -> np.ndarray:
    """Random sum of tones below ``f_max`` plus a slow trend."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    f = rng.uniform(1.0, f_max, n_tones)
    a = rng.uniform(0.2, 1.0, n_tones)
    ph = rng.uniform(0, 2 * np.pi, n_tones)
    return (a[:, None] * np.sin(2 * np.pi * f[:, None] * t + ph[:, None])).sum(0) + 0.3 * t


def tone(freq, fs=250.0, duration=4.0, amp=1.0, phase=0.0):
    t = np.arange(int(round(fs * duration))) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


@pytest.fixture
def spec10():
    return StimulusSpec(10.0, 0.0, 0)


@pytest.fixture(scope="session")
def small_dataset():
    table = FrequencyTable.from_freqs([8.0, 10.0, 12.0, 15.0])
    return Dataset(table, synthetic_dataset(table, 4, 250.0, 2.0, 2, 0.2, seed=3), 250.0)
