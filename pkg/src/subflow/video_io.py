"""Frame containers, frame-sequence file formats, and resolution reduction.

Intensities are real-valued luma in the nominal range [0, 1].  Two on-disk
formats are supported: a directory of 8-bit binary PGM (P5) files, one frame
per file in lexicographic filename order, and a single packed little-endian
float32 file (magic ``SFV1``).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError, FormatError, ParameterError

RAW_MAGIC = b"SFV1"

# 5-tap binomial used for one pyramid level of blurring.
_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class Frame:
    """One grayscale frame: a 2-D luma grid plus its frame number."""

    data: np.ndarray
    timestamp_index: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"frame data must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError("frame contains non-finite intensities")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class FrameSequence:
    """An ordered run of same-sized frames with a nominal frame rate."""

    frames: tuple[Frame, ...]
    frame_rate: float = 1.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ParameterError("frame sequence must contain at least one frame")
        shape = frames[0].data.shape
        for f in frames[1:]:
            if f.data.shape != shape:
                raise FormatError(
                    f"inconsistent frame shapes: {shape} vs {f.data.shape}"
                )
        idx = [f.timestamp_index for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise FormatError("timestamp indices must be strictly increasing")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    def to_array(self) -> np.ndarray:
        """Stack intensities into a (frames, height, width) array."""
        return np.stack([f.data for f in self.frames])

    @classmethod
    def from_array(cls, stack: np.ndarray, frame_rate: float = 1.0) -> "FrameSequence":
        stack = np.asarray(stack)
        if stack.ndim != 3:
            raise DimensionError(f"expected (frames, h, w) stack, got {stack.shape}")
        frames = tuple(Frame(stack[i], timestamp_index=i) for i in range(stack.shape[0]))
        return cls(frames=frames, frame_rate=frame_rate)


def rgb_to_luma(r: np.ndarray, g: np.ndarray, b: np.ndarray) -> Frame:
    """Combine color planes into a luma frame, Y = 0.299R + 0.587G + 0.114B."""
    r, g, b = (np.asarray(x, dtype=float) for x in (r, g, b))
    if not (r.shape == g.shape == b.shape):
        raise DimensionError(
            f"color planes differ in shape: {r.shape}, {g.shape}, {b.shape}"
        )
    return Frame(0.299 * r + 0.587 * g + 0.114 * b)


def blur_downsample_array(arr: np.ndarray, levels: int = 1) -> np.ndarray:
    """Blur+decimate the last two axes of ``arr`` by 2 per level.

    Each level runs the separable binomial (1,4,6,4,1)/16 over rows and
    columns with reflected borders, then keeps every second sample.  Works on
    single frames and on (frames, h, w) stacks alike.
    """
    if levels < 0:
        raise ParameterError("levels must be >= 0")
    out = np.asarray(arr, dtype=float)
    for _ in range(levels):
        h, w = out.shape[-2:]
        if h % 2 or w % 2:
            raise DimensionError(f"dimensions {h}x{w} not divisible by 2")
        out = ndimage.convolve1d(out, _BINOMIAL, axis=-2, mode="mirror")
        out = ndimage.convolve1d(out, _BINOMIAL, axis=-1, mode="mirror")
        out = out[..., ::2, ::2]
    return out


def blur_downsample(frame: Frame, levels: int = 1) -> Frame:
    """Frame-level wrapper around :func:`blur_downsample_array`."""
    if levels == 0:
        return frame
    return Frame(blur_downsample_array(frame.data, levels), frame.timestamp_index)


def write_frames(seq: FrameSequence, path) -> None:
    """Write a sequence as a packed float32 file (magic ``SFV1``)."""
    stack = seq.to_array().astype("<f4")
    n, h, w = stack.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<IIIf", w, h, n, float(seq.frame_rate)))
        fh.write(stack.tobytes())


def _load_raw(path) -> FrameSequence:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RAW_MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path}, expected {RAW_MAGIC!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise FormatError(f"truncated header in {path}")
        w, h, n, rate = struct.unpack("<IIIf", header)
        payload = fh.read()
    expected = n * h * w * 4
    if len(payload) < expected:
        raise FormatError(
            f"truncated payload in {path}: {len(payload)} bytes, expected {expected}"
        )
    stack = np.frombuffer(payload[:expected], dtype="<f4").reshape(n, h, w)
    stack = stack.astype(np.float32)
    if not np.all(np.isfinite(stack)):
        raise FormatError(f"non-finite intensities in {path}")
    return FrameSequence.from_array(stack, frame_rate=rate)


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Parse one binary (P5) PGM file into a float array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _PGM_TOKEN.match(raw, pos)
        if not m:
            raise FormatError(f"unparseable PGM header in {path}")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path} is not binary PGM (P5), got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"non-numeric PGM header fields in {path}") from None
    if not (0 < maxval < 256):
        raise FormatError(f"unsupported PGM maxval {maxval} in {path} (8-bit only)")
    pos += 1  # single whitespace byte after maxval
    pixels = raw[pos : pos + w * h]
    if len(pixels) < w * h:
        raise FormatError(f"truncated PGM pixel data in {path}")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return img.astype(float) / float(maxval)


def write_pgm(frame: Frame, path) -> None:
    """Write a frame as 8-bit binary PGM, clipping intensities to [0, 1]."""
    img = np.clip(np.asarray(frame.data, dtype=float), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{frame.width} {frame.height}\n255\n".encode())
        fh.write(data.tobytes())


def _load_pgm_sequence(path) -> FrameSequence:
    from pathlib import Path

    d = Path(path)
    files = sorted(d.glob("*.pgm"))
    if not files:
        raise FileNotFoundError(f"no .pgm files in {d}")
    grids = [read_pgm(f) for f in files]
    shape = grids[0].shape
    for f, g in zip(files, grids):
        if g.shape != shape:
            raise FormatError(f"{f} has shape {g.shape}, expected {shape}")
    frames = tuple(Frame(g, timestamp_index=i) for i, g in enumerate(grids))
    return FrameSequence(frames=frames)


def load_frames(path, format: str = "raw_f32") -> FrameSequence:
    """Load a frame sequence from disk.

    ``format`` selects ``raw_f32`` (single SFV1 file) or ``pgm_sequence``
    (directory of P5 files read in lexicographic order).
    """
    if format == "raw_f32":
        return _load_raw(path)
    if format == "pgm_sequence":
        return _load_pgm_sequence(path)
    raise ParameterError(f"unknown format {format!r}")
