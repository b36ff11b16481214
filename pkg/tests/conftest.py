"""
Shared fixtures for the sinomap test suite.
"""

import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from sinomap.noise_sim import ScanConfig  # noqa: E402


@pytest.fixture
def rng():
    """Seeded generator so every test draws the same numbers."""
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_sinogram():
    """Smooth 16 x 20 field with values in [0.5, 2.5]."""
    a = np.linspace(0, np.pi, 16)[:, None]
    d = np.linspace(-1, 1, 20)[None, :]
    return 1.5 + np.cos(a) * np.exp(-d ** 2)


@pytest.fixture
def noisy_scan():
    return ScanConfig(i0=1e4, sigma=10.0)


@pytest.fixture
def photon_sample(smooth_sinogram, noisy_scan):
    """Photon data drawn from the generative model for smooth_sinogram."""
    from sinomap.noise_sim import sample_low_dose

    pd, x = sample_low_dose(smooth_sinogram, noisy_scan, seed=5)
    return x, pd


TINY_CONFIG = """
[experiment]
name = tiny
seed = 3
out_dir = {out_dir}

[phantom]
size = 24
n_random = 1

[geometry]
n_angles = 16
n_detectors = 34

[scan]
doses = 10, 20
sigma = 5

[data]
n_unlabeled = 2
n_pairs = 1
n_test = 1

[net]
n_layers = 2
channels = 4

[train]
modes = supervised, unsupervised, semi
epochs = 2
batch_size = 2
checkpoint_every = 1

[tracking]
enabled = false

[tune]
k_grid = 0.1, 1
epochs = 1
"""


@pytest.fixture(scope="session")
def make_tiny_config():
    """Writes a config small enough to run the whole pipeline in seconds."""

    def _make(directory, replacements=None):
        text = TINY_CONFIG.format(out_dir=directory / "out")
        for old, new in (replacements or {}).items():
            text = text.replace(old, new)
        path = directory / "tiny.ini"
        path.write_text(text)
        return path

    return _make


@pytest.fixture
def tiny_config_text(tmp_path):
    return TINY_CONFIG.format(out_dir=tmp_path / "out")


@pytest.fixture
def tiny_config_path(tmp_path, make_tiny_config):
    return make_tiny_config(tmp_path)
