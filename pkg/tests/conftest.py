"""Shared fixtures: small deterministic inputs reused across test modules."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from subflow import phase_core, synthetic, video_io


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def texture48():
    """One 48x48 filtered-noise texture shared read-only across tests."""
    return synthetic.generate_texture(7, width=48, height=48)


@pytest.fixture
def phase_engine():
    return phase_core.PhaseEngine()


@pytest.fixture(scope="session")
def shifted_pair(texture48):
    """(reference, current, dx, dy) with a known subpixel translation."""
    dx, dy = 0.3, -0.2
    cur = synthetic.subpixel_shift(texture48, dx, dy)
    return texture48, cur, dx, dy


def upsample2(grid):
    """Fourier-pad a periodic texture to twice the resolution.

    Content at spatial frequency f lands at f / 2, so one blur-downsample
    round trip returns the spectrum to where it started.  Used to build
    source videos whose half-resolution crops are well tuned for the
    default phase filters.
    """
    h, w = grid.shape
    spectrum = np.fft.fftshift(np.fft.fft2(grid))
    big = np.zeros((2 * h, 2 * w), complex)
    big[h // 2 : h // 2 + h, w // 2 : w // 2 + w] = spectrum
    return np.clip(np.fft.ifft2(np.fft.ifftshift(big)).real * 4.0, 0.0, 1.0)


@pytest.fixture(scope="session")
def tuned_source_video():
    """Short vibration video whose downsampled crops sit in the filter band."""
    source = upsample2(synthetic.generate_texture(11, width=120, height=48).data)
    signal = synthetic.damped_sine_signal(
        30, amplitude=0.4, frequency=30.0, damping=0.02, axis="both"
    )
    video, _ = synthetic.generate_vibration_sequence(video_io.Frame(source), signal)
    return video, signal
