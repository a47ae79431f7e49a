"""Synthetic textures and videos with exactly known subpixel motion.

These sequences are the ground-truth oracle for everything else: a texture
is translated uniformly by a prescribed per-frame (dx, dy) using Fourier
interpolation, so the true displacement at every pixel is known to machine
precision (modulo periodic wrap at the frame edges, which the texture kinds
are built to tolerate).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .video_io import Frame, FrameSequence

TEXTURE_KINDS = ("filtered_noise", "bars", "blobs")


@dataclass(frozen=True)
class MotionSignal:
    """Per-frame uniform translation (dx, dy) in pixels; frame 0 is (0, 0)."""

    samples: np.ndarray
    description: str = ""

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ParameterError(f"samples must be (n, 2), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ParameterError("signal must contain at least one sample")
        if not np.allclose(arr[0], 0.0):
            raise ParameterError("first sample must be (0, 0): frame 0 is the reference")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return len(self.samples)


def damped_sine_signal(
    n_frames: int,
    amplitude: float = 0.5,
    frequency: float = 6.0,
    frame_rate: float = 1500.0,
    damping: float = 0.02,
    axis: str = "x",
) -> MotionSignal:
    """Exponentially decaying sinusoid, d(t) = A e^(-2 pi f z t) sin(2 pi f t).

    ``axis`` selects which direction carries the motion: "x", "y", or
    "both" (the y component then runs at 60% amplitude and opposite sign,
    so the two directions stay distinguishable).
    """
    if n_frames < 1:
        raise ParameterError("n_frames must be >= 1")
    if axis not in ("x", "y", "both"):
        raise ParameterError(f"axis must be 'x', 'y', or 'both', got {axis!r}")
    t = np.arange(n_frames) / float(frame_rate)
    d = amplitude * np.exp(-2.0 * np.pi * frequency * damping * t) * np.sin(
        2.0 * np.pi * frequency * t
    )
    samples = np.zeros((n_frames, 2))
    if axis in ("x", "both"):
        samples[:, 0] = d
    if axis == "y":
        samples[:, 1] = d
    elif axis == "both":
        samples[:, 1] = -0.6 * d
    desc = f"damped sine, f={frequency} Hz, A={amplitude} px, zeta={damping}, axis={axis}"
    return MotionSignal(samples=samples, description=desc)


def static_signal(n_frames: int) -> MotionSignal:
    return MotionSignal(samples=np.zeros((n_frames, 2)), description="static")


def _normalize01(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _hann_window(height: int, width: int) -> np.ndarray:
    wy = np.hanning(height)
    wx = np.hanning(width)
    return np.outer(wy, wx)


def generate_texture(
    seed: int,
    width: int = 48,
    height: int = 48,
    kind: str = "filtered_noise",
) -> Frame:
    """Deterministic seeded texture, intensities normalized to [0, 1].

    ``filtered_noise`` band-passes white noise around spatial frequency 1/8
    cycles/pixel (the quadrature filters' tuning band) and is periodic by
    construction, so circular shifting creates no seams.  ``bars`` and
    ``blobs`` are windowed to mid-gray at the edges for the same reason.
    """
    if width < 16 or height < 16:
        raise ParameterError(f"texture must be at least 16x16, got {width}x{height}")
    if kind not in TEXTURE_KINDS:
        raise ParameterError(f"unknown texture kind {kind!r}, expected {TEXTURE_KINDS}")
    rng = np.random.default_rng(seed)

    if kind == "filtered_noise":
        noise = rng.standard_normal((height, width))
        fy = np.fft.fftfreq(height)[:, None]
        fx = np.fft.fftfreq(width)[None, :]
        radius = np.hypot(fy, fx)
        band = np.exp(-((radius - 0.125) ** 2) / (2.0 * 0.04**2))
        img = np.fft.ifft2(np.fft.fft2(noise) * band).real
        return Frame(_normalize01(img))

    y, x = np.mgrid[0:height, 0:width]
    if kind == "bars":
        angle = rng.uniform(0.0, np.pi)
        period = rng.uniform(7.0, 9.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        coord = x * np.cos(angle) + y * np.sin(angle)
        pattern = np.sin(2.0 * np.pi * coord / period + phase)
    else:  # blobs
        pattern = np.zeros((height, width))
        n_blobs = max(6, (width * height) // 150)
        cx = rng.uniform(0, width, n_blobs)
        cy = rng.uniform(0, height, n_blobs)
        sign = rng.choice([-1.0, 1.0], n_blobs)
        sig = rng.uniform(1.5, 3.0, n_blobs)
        for i in range(n_blobs):
            pattern += sign[i] * np.exp(
                -((x - cx[i]) ** 2 + (y - cy[i]) ** 2) / (2.0 * sig[i] ** 2)
            )
        pattern = pattern / max(np.abs(pattern).max(), 1e-12)
    return Frame(0.5 + 0.5 * pattern * _hann_window(height, width))


def subpixel_shift(frame, dx: float, dy: float) -> Frame:
    """Circularly translate a frame by (dx, dy) pixels via a spectral ramp.

    Exact for periodic band-limited content; +dx moves content toward +x
    (growing column index), +dy toward +y (growing row index).
    """
    grid = np.asarray(getattr(frame, "data", frame), dtype=float)
    h, w = grid.shape
    if h < 8 or w < 8:
        raise ParameterError(f"frame must be at least 8x8, got {h}x{w}")
    if abs(dx) >= w / 4 or abs(dy) >= h / 4:
        raise ParameterError(
            f"shift ({dx}, {dy}) exceeds a quarter of the frame ({w}x{h})"
        )
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    ramp = np.exp(-2j * np.pi * (fx * dx + fy * dy))
    # Keep the spectrum Hermitian for even sizes: the Nyquist bins have no
    # conjugate partner, so their ramp must be real for a real output.
    if h % 2 == 0:
        ramp[h // 2, :] = ramp[h // 2, :].real
    if w % 2 == 0:
        ramp[:, w // 2] = ramp[:, w // 2].real
    shifted = np.fft.ifft2(np.fft.fft2(grid) * ramp).real
    index = getattr(frame, "timestamp_index", 0)
    return Frame(shifted, timestamp_index=index)


def generate_vibration_sequence(
    texture: Frame,
    signal: MotionSignal,
    frame_rate: float = 1500.0,
    noise_sigma: float = 0.0,
    noise_seed: int = 0,
) -> tuple[FrameSequence, MotionSignal]:
    """Translate ``texture`` by each signal sample; frame t carries signal[t].

    Returns the sequence together with the signal, which is the per-frame
    uniform ground truth (every pixel of frame t is displaced by exactly
    signal.samples[t] relative to frame 0).  Optional additive Gaussian
    noise is applied after shifting and never to frame 0's geometry.
    """
    if len(signal) < 1:
        raise ParameterError("signal must be non-empty")
    rng = np.random.default_rng(noise_seed)
    frames = []
    for i, (dx, dy) in enumerate(signal.samples):
        shifted = subpixel_shift(texture, float(dx), float(dy))
        grid = shifted.data
        if noise_sigma > 0:
            grid = grid + rng.normal(0.0, noise_sigma, grid.shape)
        frames.append(Frame(grid, timestamp_index=i))
    return FrameSequence(frames=tuple(frames), frame_rate=frame_rate), signal


def write_signal_csv(signal: MotionSignal, path) -> None:
    """Write the signal as CSV rows of (frame_index, dx, dy)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "dx", "dy"])
        for i, (dx, dy) in enumerate(signal.samples):
            writer.writerow([i, repr(float(dx)), repr(float(dy))])


def read_signal_csv(path) -> MotionSignal:
    """Read a signal written by :func:`write_signal_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["frame_index", "dx", "dy"]:
        raise ParameterError(f"{path} is not a motion-signal CSV")
    samples = np.array([[float(r[1]), float(r[2])] for r in rows[1:]])
    return MotionSignal(samples=samples, description=f"loaded from {path}")
