"""Quadrature filtering, local phase, texture masks, and displacement fields.

A displacement field is recovered from a frame pair in four steps: filter
both frames with an even/odd quadrature pair to get complex responses,
difference the local phase against the reference frame, divide by the
reference's spatial phase gradient, and keep only well-textured pixels.

Conventions: arrays are indexed [y, x]; the ``horizontal`` orientation
oscillates along x and feeds the u (horizontal) displacement; shifting
content toward +x yields positive u.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionError,
    DisplacementRangeWarning,
    ParameterError,
)

ORIENTATIONS = ("horizontal", "vertical")

EPS_AMP = 1e-8
EPS_GRAD = 1e-3


@dataclass(frozen=True)
class FilterPair:
    """Even/odd (cosine/sine) Gabor kernels forming one complex filter."""

    even: np.ndarray
    odd: np.ndarray
    orientation: str
    wavelength: float
    sigma: float


@dataclass(frozen=True)
class ComplexResponse:
    """Local amplitude and phase of a frame under one quadrature pair."""

    amplitude: np.ndarray
    phase: np.ndarray
    orientation: str
    wavelength: float

    def complex_values(self) -> np.ndarray:
        """Rebuild the complex response S = A * exp(i * phase)."""
        return self.amplitude * np.exp(1j * self.phase)


@dataclass(frozen=True)
class TextureMask:
    """Pixels whose amplitude and phase gradient support reliable motion."""

    mask: np.ndarray
    direction: str
    threshold_used: float

    def count(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True)
class MotionField:
    """Per-pixel displacements (pixels) with their per-direction masks."""

    u: np.ndarray
    v: np.ndarray
    mask_u: TextureMask
    mask_v: TextureMask


@dataclass(frozen=True)
class MaskConfig:
    """Texture-mask thresholds.

    ``coefficient`` scales the amplitude threshold T0 (the mean of the
    ``top_k`` largest amplitudes divided by 5); ``eps_grad`` rejects
    near-zero phase gradients; ``border`` pixels at each edge are always
    excluded because padding corrupts phase there.
    """

    coefficient: float = 1.0
    top_k: int = 30
    eps_amp: float = EPS_AMP
    eps_grad: float = EPS_GRAD
    border: int = 4


def build_quadrature_pair(
    orientation: str = "horizontal",
    wavelength: float = 8.0,
    sigma: float = 2.0,
    kernel_size: int = 9,
) -> FilterPair:
    """Construct a Gaussian-windowed cosine/sine kernel pair.

    The even kernel is mean-subtracted under the Gaussian window (exact DC
    rejection), both kernels are L2-normalized, and the even kernel is then
    rescaled so both channels respond to a pure wave at the tuning
    wavelength with equal magnitude (quadrature balance).
    """
    if orientation not in ORIENTATIONS:
        raise ParameterError(f"orientation must be one of {ORIENTATIONS}")
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ParameterError(f"kernel_size must be odd and positive, got {kernel_size}")
    if wavelength <= 2:
        raise ParameterError(f"wavelength must exceed 2 pixels, got {wavelength}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")

    offs = np.arange(kernel_size) - kernel_size // 2
    x, y = np.meshgrid(offs, offs)
    s = x if orientation == "horizontal" else y
    window = np.exp(-(x**2 + y**2) / (2.0 * sigma**2))
    cos_wave = np.cos(2.0 * np.pi * s / wavelength)
    sin_wave = np.sin(2.0 * np.pi * s / wavelength)

    mean_under_window = (window * cos_wave).sum() / window.sum()
    even = window * (cos_wave - mean_under_window)
    odd = window * sin_wave
    even /= np.linalg.norm(even)
    odd /= np.linalg.norm(odd)

    # Equalize passband gain: scale the even channel so its response to the
    # tuning wave matches the odd channel's.
    gain_even = (even * cos_wave).sum()
    gain_odd = (odd * sin_wave).sum()
    even *= gain_odd / gain_even

    return FilterPair(
        even=even,
        odd=odd,
        orientation=orientation,
        wavelength=float(wavelength),
        sigma=float(sigma),
    )


def _as_grid(frame) -> np.ndarray:
    grid = np.asarray(getattr(frame, "data", frame), dtype=float)
    if grid.ndim != 2:
        raise DimensionError(f"expected a 2-D frame, got shape {grid.shape}")
    return grid


def analyze(frame, pair: FilterPair) -> ComplexResponse:
    """Filter a frame into its complex response S = (even * I) + i(odd * I).

    True convolution with reflected borders; the output keeps the frame's
    shape.  ``frame`` may be a :class:`~subflow.video_io.Frame` or a bare
    2-D array.
    """
    grid = _as_grid(frame)
    k = pair.even.shape[0]
    if k > min(grid.shape):
        raise DimensionError(
            f"kernel size {k} exceeds frame dimensions {grid.shape}"
        )
    response = ndimage.convolve(grid, pair.even, mode="mirror") + 1j * ndimage.convolve(
        grid, pair.odd, mode="mirror"
    )
    return ComplexResponse(
        amplitude=np.abs(response),
        phase=np.angle(response),
        orientation=pair.orientation,
        wavelength=pair.wavelength,
    )


def phase_gradient(response: ComplexResponse, axis: str) -> np.ndarray:
    """Wrap-safe spatial phase derivative in radians per pixel.

    Computed as Im(conj(S) dS)/|S|^2 with central differences (one-sided at
    borders), which never sees phase wraps.  Central differences attenuate
    the derivative of a wave at the tuning frequency w0 by sin(w0)/w0, so
    the result is compensated by w0/sin(w0); without this the recovered
    displacements at the passband center would be biased by ~10%.  Pixels
    with amplitude below the floor return NaN for mask construction to drop.
    """
    if axis not in ("x", "y"):
        raise ParameterError(f"axis must be 'x' or 'y', got {axis!r}")
    s = response.complex_values()
    ds = np.gradient(s, axis=1 if axis == "x" else 0)
    power = response.amplitude**2
    w0 = 2.0 * np.pi / response.wavelength
    compensation = w0 / np.sin(w0)
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = (np.conj(s) * ds).imag / power * compensation
    return np.where(power >= EPS_AMP**2, raw, np.nan)


def texture_mask(
    response: ComplexResponse,
    grad: np.ndarray,
    cfg: MaskConfig | None = None,
) -> TextureMask:
    """Select pixels with strong texture and a well-conditioned gradient.

    A pixel passes when its amplitude reaches ``coefficient * T0`` (T0 being
    a fifth of the mean of the ``top_k`` largest amplitudes), its phase
    gradient is finite and at least ``eps_grad`` in magnitude, the gradient
    does not change sign against any 4-neighbor (zero-crossing removal), and
    it lies outside the ``border`` ring.
    """
    cfg = cfg or MaskConfig()
    amp = response.amplitude
    if amp.shape != np.shape(grad):
        raise DimensionError(f"amplitude {amp.shape} vs gradient {np.shape(grad)}")
    if amp.size < cfg.top_k:
        raise ParameterError(
            f"frame has {amp.size} pixels, need at least {cfg.top_k} for the threshold"
        )
    top = np.sort(amp, axis=None)[-cfg.top_k :]
    t0 = float(top.mean()) / 5.0
    threshold = cfg.coefficient * t0

    amp_ok = amp >= threshold
    with np.errstate(invalid="ignore"):
        grad_ok = np.isfinite(grad) & (np.abs(grad) >= cfg.eps_grad)
        sign_change = np.zeros(amp.shape, dtype=bool)
        flip_v = grad[1:, :] * grad[:-1, :] < 0
        flip_h = grad[:, 1:] * grad[:, :-1] < 0
    sign_change[1:, :] |= flip_v
    sign_change[:-1, :] |= flip_v
    sign_change[:, 1:] |= flip_h
    sign_change[:, :-1] |= flip_h

    mask = amp_ok & grad_ok & ~sign_change
    b = cfg.border
    if b > 0:
        mask[:b, :] = False
        mask[-b:, :] = False
        mask[:, :b] = False
        mask[:, -b:] = False
    return TextureMask(mask=mask, direction=response.orientation, threshold_used=threshold)


def wrap_phase(delta: np.ndarray) -> np.ndarray:
    """Map phase differences into (-pi, pi]."""
    return np.angle(np.exp(1j * np.asarray(delta)))


def _one_direction(ref, cur, mask, axis, grad=None):
    dphi = wrap_phase(cur.phase - ref.phase)
    if grad is None:
        grad = phase_gradient(ref, axis)
    m = mask.mask
    with np.errstate(invalid="ignore", divide="ignore"):
        disp = np.where(m, -dphi / grad, 0.0)
    if m.any():
        near_wrap = np.abs(dphi[m]) > 0.9 * np.pi
        if near_wrap.mean() > 0.2:
            warnings.warn(
                f"{mask.direction} phase deltas approach the wrap limit "
                f"({near_wrap.mean():.0%} of masked pixels beyond 0.9 pi); "
                "displacements of half a wavelength or more are ambiguous",
                DisplacementRangeWarning,
                stacklevel=3,
            )
    return disp


def displacement_field(ref, cur, masks, grads=None) -> MotionField:
    """Recover displacements of ``cur`` relative to ``ref``.

    ``ref`` and ``cur`` are (horizontal, vertical) ComplexResponse pairs
    from the same filter bank; ``masks`` is the (mask_u, mask_v) pair built
    on the reference.  u = -wrap(phase difference)/(reference phase
    gradient) on masked pixels and 0 elsewhere; v analogously.  ``grads``
    optionally supplies precomputed (d/dx, d/dy) reference gradients.
    """
    ref_h, ref_v = ref
    cur_h, cur_v = cur
    mask_u, mask_v = masks
    for resp, want in ((ref_h, "horizontal"), (ref_v, "vertical"), (cur_h, "horizontal"), (cur_v, "vertical")):
        if resp.orientation != want:
            raise ParameterError(f"expected {want} response, got {resp.orientation}")
    shape = ref_h.amplitude.shape
    for grid in (ref_v.amplitude, cur_h.amplitude, cur_v.amplitude, mask_u.mask, mask_v.mask):
        if grid.shape != shape:
            raise DimensionError(f"shape mismatch: {grid.shape} vs {shape}")
    grad_x, grad_y = grads if grads is not None else (None, None)
    u = _one_direction(ref_h, cur_h, mask_u, "x", grad_x)
    v = _one_direction(ref_v, cur_v, mask_v, "y", grad_y)
    return MotionField(u=u, v=v, mask_u=mask_u, mask_v=mask_v)


def uniform_motion_field(shape, dx: float, dy: float, masks=None) -> MotionField:
    """Constant-translation field: u = dx and v = dy at every pixel.

    The ground-truth counterpart of a uniformly shifted frame.  ``masks``
    optionally attaches a (mask_u, mask_v) pair for masked-region metrics;
    by default every pixel is masked true.  The displacement grids stay
    uniform either way, since the underlying motion is uniform.
    """
    shape = tuple(shape)
    if masks is None:
        full = np.ones(shape, dtype=bool)
        masks = (
            TextureMask(mask=full, direction="horizontal", threshold_used=0.0),
            TextureMask(mask=full, direction="vertical", threshold_used=0.0),
        )
    mask_u, mask_v = masks
    if mask_u.mask.shape != shape or mask_v.mask.shape != shape:
        raise DimensionError(f"mask shapes do not match field shape {shape}")
    return MotionField(
        u=np.full(shape, float(dx)),
        v=np.full(shape, float(dy)),
        mask_u=mask_u,
        mask_v=mask_v,
    )


@dataclass(frozen=True)
class ReferenceAnalysis:
    """Everything derived from a reference frame, reusable across pairs."""

    horizontal: ComplexResponse
    vertical: ComplexResponse
    grad_x: np.ndarray
    grad_y: np.ndarray
    mask_u: TextureMask
    mask_v: TextureMask


class PhaseEngine:
    """Frame-pair to MotionField extractor with a cached reference.

    The engine shares its interface with the trained-network engine: call
    ``motion(reference_frame, current_frame)``.  Reference-side filtering,
    gradients, and masks are cached per reference object, so sweeping many
    frames against one reference only pays for the current-frame analysis.
    """

    def __init__(
        self,
        wavelength: float = 8.0,
        sigma: float = 2.0,
        kernel_size: int = 9,
        mask_cfg: MaskConfig | None = None,
    ):
        self.pairs = {
            o: build_quadrature_pair(o, wavelength, sigma, kernel_size)
            for o in ORIENTATIONS
        }
        self.mask_cfg = mask_cfg or MaskConfig()
        self._ref_obj = None
        self._ref_analysis: ReferenceAnalysis | None = None

    def reference(self, ref) -> ReferenceAnalysis:
        """Analyze (or fetch the cached analysis of) a reference frame."""
        if self._ref_obj is not ref:
            horizontal = analyze(ref, self.pairs["horizontal"])
            vertical = analyze(ref, self.pairs["vertical"])
            grad_x = phase_gradient(horizontal, "x")
            grad_y = phase_gradient(vertical, "y")
            self._ref_analysis = ReferenceAnalysis(
                horizontal=horizontal,
                vertical=vertical,
                grad_x=grad_x,
                grad_y=grad_y,
                mask_u=texture_mask(horizontal, grad_x, self.mask_cfg),
                mask_v=texture_mask(vertical, grad_y, self.mask_cfg),
            )
            self._ref_obj = ref
        return self._ref_analysis

    def motion(self, ref, cur) -> MotionField:
        """Displacement field of ``cur`` relative to ``ref``."""
        bound = self.reference(ref)
        cur_h = analyze(cur, self.pairs["horizontal"])
        cur_v = analyze(cur, self.pairs["vertical"])
        return displacement_field(
            (bound.horizontal, bound.vertical),
            (cur_h, cur_v),
            (bound.mask_u, bound.mask_v),
            grads=(bound.grad_x, bound.grad_y),
        )


def write_filter_csv(pair: FilterPair, directory, prefix: str = "filter") -> list:
    """Export kernel taps as CSV grids; returns the written paths."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, kernel in (("even", pair.even), ("odd", pair.odd)):
        path = d / f"{prefix}_{pair.orientation}_{name}.csv"
        np.savetxt(path, kernel, delimiter=",")
        paths.append(path)
    return paths
