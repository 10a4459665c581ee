import numpy as np
import pytest

import chromaphase
from chromaphase import util
from chromaphase.dataset import SimulationSpec


@pytest.fixture
def rng():
    return util.rng_stream(1234, 0)


@pytest.fixture
def sinusoid_phase():
    """
    Weak pure-phase sinusoid, 0.2 rad amplitude, period 16 px on a 64 x
    64 grid.
    """
    x = np.arange(64)
    return 0.2 * np.sin(2 * np.pi * x[None, :] / 16) * np.cos(2 * np.pi * x[:, None] / 16)


@pytest.fixture
def quiet_spec():
    """
    Noise-free simulation at a fixed 2 um defocus with the default
    channel widths.
    """
    return SimulationSpec(
        phase_max=1.0,
        z_range=(2e-6, 2e-6),
        sigma_c_range=None,
        noise_sigma=0.0,
        seed=7,
    )


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.setenv("CHROMAPHASE_THREADS", "1")
    monkeypatch.setenv("CHROMAPHASE_VERBOSE", "no")
    return chromaphase
