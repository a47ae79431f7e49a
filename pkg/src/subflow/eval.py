"""Evaluation: MAE over pixel regions, threshold sweeps, time histories,
learned-filter export, and inference benchmarking.

All results are data (floats, arrays, CSV/JSON writers); figure rendering
lives in :mod:`subflow.report`.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nn
from .errors import DimensionError, EmptyRegionError, ParameterError
from .phase_core import MotionField, TextureMask
from .video_io import FrameSequence

REGIONS = ("full", "interior", "masked")
INTERIOR_BORDER = 4


class MAEResult(NamedTuple):
    """Mean absolute displacement error in pixels, per direction."""

    u: float
    v: float


@dataclass(frozen=True)
class SweepResult:
    """MAE and pixel counts across threshold coefficients, one direction."""

    coefficients: tuple
    mae_per_c: tuple
    pixel_counts: tuple
    direction: str


@dataclass(frozen=True)
class TimeHistory:
    """Displacement trajectory of one pixel; rows are (frame, u, v)."""

    pixel: tuple
    samples: np.ndarray


@dataclass(frozen=True)
class BenchReport:
    """Wall-clock inference cost of the network vs the phase engine."""

    net_ms_per_pair: float
    net_pairs_per_second: float
    phase_ms_per_pair: float
    phase_pairs_per_second: float
    speed_ratio: float
    n_pairs: int


def _region_selectors(pred: MotionField, truth: MotionField, region: str):
    shape = truth.u.shape
    if pred.u.shape != shape:
        raise DimensionError(f"pred {pred.u.shape} vs truth {shape}")
    if region == "full":
        sel = np.ones(shape, dtype=bool)
        return sel, sel
    if region == "interior":
        b = INTERIOR_BORDER
        if shape[0] <= 2 * b or shape[1] <= 2 * b:
            raise EmptyRegionError(f"interior of {shape} with border {b} is empty")
        sel = np.zeros(shape, dtype=bool)
        sel[b:-b, b:-b] = True
        return sel, sel
    if region == "masked":
        return truth.mask_u.mask, truth.mask_v.mask
    raise ParameterError(f"region must be one of {REGIONS}, got {region!r}")


def evaluate_mae(pred: MotionField, truth: MotionField, region: str = "masked") -> MAEResult:
    """Mean |pred - truth| per direction over the selected pixel set.

    ``region``: every pixel, the interior after dropping a 4-pixel border,
    or the truth's texture-masked pixels.  An empty pixel set raises
    :class:`EmptyRegionError` rather than returning NaN.
    """
    sel_u, sel_v = _region_selectors(pred, truth, region)
    if not sel_u.any() or not sel_v.any():
        raise EmptyRegionError(f"region {region!r} selects no pixels")
    mae_u = float(np.abs(pred.u - truth.u)[sel_u].mean())
    mae_v = float(np.abs(pred.v - truth.v)[sel_v].mean())
    return MAEResult(u=mae_u, v=mae_v)


def threshold_sweep(
    pred: MotionField,
    truth: MotionField,
    amplitudes: np.ndarray,
    coefficients,
    direction: str = "u",
    base_threshold: float | None = None,
) -> SweepResult:
    """Restrict the masked MAE to amplitudes >= C * T0 for each C.

    ``amplitudes`` is the reference frame's filter amplitude field for the
    chosen direction; T0 defaults to the truth mask's recorded threshold
    divided by its own coefficient of 1 (i.e. ``threshold_used``).  Raising
    C never adds pixels.  A coefficient emptying the mask records count 0
    and NaN MAE instead of raising.
    """
    coefficients = tuple(float(c) for c in coefficients)
    if not coefficients or any(c < 0 for c in coefficients):
        raise ParameterError("coefficients must be non-empty and non-negative")
    if direction not in ("u", "v"):
        raise ParameterError(f"direction must be 'u' or 'v', got {direction!r}")
    base_mask: TextureMask = truth.mask_u if direction == "u" else truth.mask_v
    pred_grid = pred.u if direction == "u" else pred.v
    truth_grid = truth.u if direction == "u" else truth.v
    amplitudes = np.asarray(amplitudes)
    if amplitudes.shape != truth_grid.shape:
        raise DimensionError(
            f"amplitudes {amplitudes.shape} vs field {truth_grid.shape}"
        )
    t0 = base_threshold if base_threshold is not None else base_mask.threshold_used
    maes, counts = [], []
    for c in coefficients:
        sel = base_mask.mask & (amplitudes >= c * t0)
        count = int(np.count_nonzero(sel))
        counts.append(count)
        if count == 0:
            maes.append(float("nan"))
        else:
            maes.append(float(np.abs(pred_grid - truth_grid)[sel].mean()))
    return SweepResult(
        coefficients=coefficients,
        mae_per_c=tuple(maes),
        pixel_counts=tuple(counts),
        direction=direction,
    )


class NetworkEngine:
    """Trained-network counterpart of the phase engine.

    Shares the ``motion(reference, current)`` interface so time-history
    extraction runs identically on both.  The network predicts everywhere,
    so the returned field carries all-true masks.
    """

    def __init__(self, params: nn.NetworkParams):
        self.params = params

    def motion(self, ref, cur) -> MotionField:
        ref_grid = np.asarray(getattr(ref, "data", ref), dtype=np.float32)
        cur_grid = np.asarray(getattr(cur, "data", cur), dtype=np.float32)
        out = nn.predict(self.params, ref_grid[None, None], cur_grid[None, None])
        full = np.ones(ref_grid.shape, dtype=bool)
        return MotionField(
            u=out[0, 0].astype(float),
            v=out[0, 1].astype(float),
            mask_u=TextureMask(mask=full, direction="horizontal", threshold_used=0.0),
            mask_v=TextureMask(mask=full, direction="vertical", threshold_used=0.0),
        )


def extract_time_history(engine, video: FrameSequence, pixels) -> list[TimeHistory]:
    """Track (u, v) at selected pixels across a video, frame 0 as reference.

    ``engine`` is any object with ``motion(reference, current)``; works for
    the phase engine and the trained network alike.  ``pixels`` are (x, y)
    coordinates.  Row 0 of each history is the reference frame's (0, 0).
    """
    if len(video) < 2:
        raise ParameterError("video must have at least 2 frames")
    h, w = video[0].data.shape
    pixels = [tuple(int(c) for c in p) for p in pixels]
    for x, y in pixels:
        if not (0 <= x < w and 0 <= y < h):
            raise ParameterError(f"pixel ({x}, {y}) outside {w}x{h} frame")
    samples = {p: [(0, 0.0, 0.0)] for p in pixels}
    ref = video[0]
    for t in range(1, len(video)):
        field = engine.motion(ref, video[t])
        for x, y in pixels:
            samples[(x, y)].append((t, float(field.u[y, x]), float(field.v[y, x])))
    return [
        TimeHistory(pixel=p, samples=np.array(samples[p], dtype=float)) for p in pixels
    ]


def write_time_history_csv(histories: list, path) -> None:
    """One CSV for all tracked pixels: frame, then u/v per pixel."""
    header = ["frame_index"]
    for hist in histories:
        x, y = hist.pixel
        header += [f"u_{x}_{y}", f"v_{x}_{y}"]
    n = len(histories[0].samples)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n):
            row = [int(histories[0].samples[i, 0])]
            for hist in histories:
                row += [repr(float(hist.samples[i, 1])), repr(float(hist.samples[i, 2]))]
            writer.writerow(row)


def write_sweep_csv(sweeps: list, path) -> None:
    """Sweeps (one per direction) as rows of coefficient, MAE, pixel count."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["direction", "coefficient", "mae", "pixel_count"])
        for sweep in sweeps:
            for c, mae, count in zip(
                sweep.coefficients, sweep.mae_per_c, sweep.pixel_counts
            ):
                writer.writerow([sweep.direction, c, repr(mae), count])


def export_learned_filters(params: nn.NetworkParams, directory, prefix="kernel") -> list:
    """Write each first-layer kernel as one CSV grid; returns the paths.

    Multi-input-channel kernels are written with their input slices side by
    side in one grid.
    """
    first_name = "a_enc1" if "a_enc1" in params.layers else "enc1"
    kernel = params.layers[first_name].kernel
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(kernel.shape[0]):
        grid = np.hstack([kernel[i, c] for c in range(kernel.shape[1])])
        path = d / f"{prefix}_{i:02d}.csv"
        np.savetxt(path, grid, delimiter=",")
        paths.append(path)
    return paths


def read_filter_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",")


def benchmark_inference(
    params: nn.NetworkParams,
    n_pairs: int = 100,
    phase_engine=None,
    seed: int = 0,
    size: int = 48,
) -> BenchReport:
    """Time single-pair forward passes against the phase engine.

    Random textured pairs of ``size`` x ``size``; both paths process the
    same pairs one at a time.
    """
    if n_pairs < 10:
        raise ParameterError("n_pairs must be >= 10 for stable timing")
    from .phase_core import PhaseEngine
    from .synthetic import generate_texture, subpixel_shift

    if phase_engine is None:
        phase_engine = PhaseEngine()
    rng = np.random.default_rng(seed)
    refs, curs = [], []
    for i in range(n_pairs):
        tex = generate_texture(seed + i, size, size)
        refs.append(tex)
        curs.append(subpixel_shift(tex, float(rng.uniform(-0.5, 0.5)), 0.0))

    ref32 = [r.data.astype(np.float32)[None, None] for r in refs]
    cur32 = [c.data.astype(np.float32)[None, None] for c in curs]
    nn.predict(params, ref32[0], cur32[0])  # warm up
    started = time.perf_counter()
    for r, c in zip(ref32, cur32):
        nn.predict(params, r, c)
    net_ms = (time.perf_counter() - started) / n_pairs * 1000.0

    phase_engine.motion(refs[0], curs[0])  # warm up and bind
    started = time.perf_counter()
    for r, c in zip(refs, curs):
        phase_engine.motion(r, c)
    phase_ms = (time.perf_counter() - started) / n_pairs * 1000.0

    return BenchReport(
        net_ms_per_pair=net_ms,
        net_pairs_per_second=1000.0 / net_ms,
        phase_ms_per_pair=phase_ms,
        phase_pairs_per_second=1000.0 / phase_ms,
        speed_ratio=phase_ms / net_ms,
        n_pairs=n_pairs,
    )


def write_metrics_json(metrics: dict, path) -> None:
    """JSON summary keyed by metric name; NaN encoded as null."""

    def clean(value):
        if isinstance(value, dict):
            return {k: clean(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [clean(v) for v in value]
        if isinstance(value, (np.floating, float)):
            value = float(value)
            return None if np.isnan(value) else value
        if isinstance(value, (np.integer,)):
            return int(value)
        return value

    with open(path, "w") as fh:
        json.dump(clean(metrics), fh, indent=2, sort_keys=True)
        fh.write("\n")
