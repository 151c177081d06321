import numpy as np
import pytest

from stormtail.data import SynthConfig, generate_synthetic, split_by_period


@pytest.fixture(scope="session")
def tiny_dataset():
    """140 small samples spanning the three split periods (shared, read-only)."""
    samples = generate_synthetic(SynthConfig(num_samples=140, grid=(16, 16), seed=11))
    split = split_by_period(samples)
    return samples, split


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
