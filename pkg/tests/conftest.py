import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from pupilholo.autodiff import deterministic, set_precision
from pupilholo.optics import OpticalConfig

settings.register_profile("default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _det():
    deterministic(0)
    set_precision("binary32")
    yield
    set_precision("binary32")


@pytest.fixture
def cfg():
    return OpticalConfig()


@pytest.fixture
def cfg64():
    return OpticalConfig(resolution=(64, 64))


def bandlimited_field(n=64, seed=0, frac=0.25, dtype=torch.complex64):
    """Random complex field whose spectrum is confined to |f| < frac (cycles/px)."""
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, n, generator=g, dtype=torch.float64) + 1j * torch.randn(n, n, generator=g, dtype=torch.float64)
    f = torch.fft.fftfreq(n, dtype=torch.float64)
    mask = (f[:, None] ** 2 + f[None, :] ** 2) < frac**2
    return torch.fft.ifft2(torch.fft.fft2(z) * mask).to(dtype)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))
