"""Training-data generation: crops, phase-based labels, and binary shards.

A source video is split spatially into named segments (train/validation/
test) along its width and temporally into fixed-length sections.  Each
section of each segment is covered by random square crop boxes, each box
yielding one sub-video whose frames are blurred and downsampled to half
resolution.  The section's first frame is the reference; every later frame
forms one labeled pair, with the label extracted by the phase engine.

Note on units: labels live on the downsampled grid, so a translation of
d pixels in the source video appears as d/2 pixels in the labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, FormatError, ParameterError
from .phase_core import MotionField, PhaseEngine, TextureMask
from .video_io import Frame, FrameSequence, blur_downsample_array

SHARD_MAGIC = b"SFDS"
SHARD_VERSION = 1
SHARD_CAPACITY = 4096

SEGMENT_NAMES = ("train", "validation", "test")
SOURCES = ("original", "flipped")


@dataclass(frozen=True)
class CropPlan:
    """One crop box in one temporal section of one spatial segment.

    ``source`` selects the original video or its transposed (flipped) copy;
    for the flipped source the box coordinates live in the transposed
    geometry, where the segment's column range applies to rows.
    """

    segment: str
    section_index: int
    box: tuple[int, int, int, int]
    source: str = "original"


@dataclass(frozen=True)
class LabeledPair:
    """One training sample: reference/current frames plus the motion label."""

    reference: Frame
    current: Frame
    label: MotionField
    plan: CropPlan | None = None
    pair_index: int = 0


class DatasetArrays(NamedTuple):
    """Stacked sample tensors ready for training."""

    reference: np.ndarray  # (n, h, w) float32
    current: np.ndarray  # (n, h, w) float32
    labels: np.ndarray  # (n, 2, h, w) float32, u then v
    masks: np.ndarray  # (n, 2, h, w) bool


def segment_ranges(width: int, fractions=(0.6, 0.2, 0.2)) -> dict:
    """Split the width into contiguous train/validation/test column ranges."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError("fractions must be three values summing to 1")
    x1 = int(round(width * fractions[0]))
    x2 = x1 + int(round(width * fractions[1]))
    return {
        "train": (0, x1),
        "validation": (x1, x2),
        "test": (x2, width),
    }


def plan_crops(
    video_dims: tuple[int, int],
    segments: dict,
    sections: int,
    boxes_per_section: dict,
    seed: int = 0,
    box_size: int = 96,
    include_flipped: bool = True,
) -> list[CropPlan]:
    """Draw random crop boxes for every (segment, section, source) triple.

    ``video_dims`` is (width, height); ``segments`` maps segment names to
    half-open column ranges (x0, x1); ``boxes_per_section`` maps segment
    names to box counts.  Deterministic given ``seed``; every section draws
    its own boxes.
    """
    width, height = video_dims
    if sections < 1:
        raise ParameterError("sections must be >= 1")
    for name, count in boxes_per_section.items():
        if name not in segments:
            raise ParameterError(f"segment {name!r} has no spatial range")
        x0, x1 = segments[name]
        if x1 - x0 < box_size or height < box_size:
            raise ParameterError(
                f"segment {name!r} extent {x1 - x0}x{height} cannot fit a "
                f"{box_size}px box"
            )
        if count < 1:
            raise ParameterError(f"box count for {name!r} must be >= 1")

    rng = np.random.default_rng(seed)
    sources = SOURCES if include_flipped else ("original",)
    plans = []
    for name in sorted(boxes_per_section):
        count = boxes_per_section[name]
        x0, x1 = segments[name]
        for section in range(sections):
            for source in sources:
                for _ in range(count):
                    along = int(rng.integers(x0, x1 - box_size + 1))
                    across = int(rng.integers(0, height - box_size + 1))
                    if source == "original":
                        box = (along, across, box_size, box_size)
                    else:
                        # transposed geometry: segment range constrains rows
                        box = (across, along, box_size, box_size)
                    plans.append(
                        CropPlan(
                            segment=name,
                            section_index=section,
                            box=box,
                            source=source,
                        )
                    )
    return plans


def build_labeled_pairs(
    video: FrameSequence,
    plan: CropPlan,
    frames_per_section: int,
    engine: PhaseEngine | None = None,
    levels: int = 1,
) -> list[LabeledPair]:
    """Crop, downsample, and label one plan's sub-video.

    Returns ``frames_per_section - 1`` pairs: the section's first frame is
    the reference for all of them.  Frames are stored as float32 and labels
    are computed from those quantized frames, so recomputing a label from a
    stored pair reproduces it.
    """
    engine = engine or PhaseEngine()
    fps = frames_per_section
    start = plan.section_index * fps
    if start + fps > len(video):
        raise ParameterError(
            f"section {plan.section_index} needs frames [{start}, {start + fps}) "
            f"but the video has {len(video)}"
        )
    x0, y0, bw, bh = plan.box
    crops = []
    for i in range(start, start + fps):
        grid = video[i].data
        if plan.source == "flipped":
            grid = grid.T
        if y0 + bh > grid.shape[0] or x0 + bw > grid.shape[1]:
            raise DimensionError(
                f"box {plan.box} exceeds {plan.source} frame shape {grid.shape}"
            )
        crops.append(grid[y0 : y0 + bh, x0 : x0 + bw])
    stack = blur_downsample_array(np.stack(crops), levels).astype(np.float32)

    ref = Frame(stack[0], timestamp_index=0)
    pairs = []
    for i in range(1, fps):
        cur = Frame(stack[i], timestamp_index=i)
        field = engine.motion(ref, cur)
        label = MotionField(
            u=field.u.astype(np.float32),
            v=field.v.astype(np.float32),
            mask_u=field.mask_u,
            mask_v=field.mask_v,
        )
        pairs.append(
            LabeledPair(reference=ref, current=cur, label=label, plan=plan, pair_index=i)
        )
    return pairs


def _sample_dtype(h: int, w: int) -> np.dtype:
    return np.dtype(
        [
            ("reference", "<f4", (h, w)),
            ("current", "<f4", (h, w)),
            ("label_u", "<f4", (h, w)),
            ("label_v", "<f4", (h, w)),
            ("mask_u", "u1", (h, w)),
            ("mask_v", "u1", (h, w)),
        ]
    )


def write_shards(pairs: list, directory, max_per_shard: int = SHARD_CAPACITY) -> list:
    """Persist pairs as fixed-capacity binary shards; returns written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for shard_index, lo in enumerate(range(0, len(pairs), max_per_shard)):
        chunk = pairs[lo : lo + max_per_shard]
        h, w = chunk[0].reference.data.shape
        record = np.zeros(len(chunk), dtype=_sample_dtype(h, w))
        for i, p in enumerate(chunk):
            record[i]["reference"] = p.reference.data
            record[i]["current"] = p.current.data
            record[i]["label_u"] = p.label.u
            record[i]["label_v"] = p.label.v
            record[i]["mask_u"] = p.label.mask_u.mask
            record[i]["mask_v"] = p.label.mask_v.mask
        path = d / f"shard_{shard_index:04d}.sfds"
        with open(path, "wb") as fh:
            fh.write(SHARD_MAGIC)
            fh.write(struct.pack("<IIII", SHARD_VERSION, len(chunk), h, w))
            fh.write(record.tobytes())
        paths.append(path)
    return paths


def read_shards(directory) -> list[LabeledPair]:
    """Load every shard in a directory; an empty directory yields []."""
    d = Path(directory)
    pairs: list[LabeledPair] = []
    for path in sorted(d.glob("*.sfds")):
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != SHARD_MAGIC:
                raise FormatError(f"bad magic {magic!r} in shard {path}")
            header = fh.read(16)
            if len(header) != 16:
                raise OSError(f"truncated header in shard {path}")
            version, count, h, w = struct.unpack("<IIII", header)
            if version != SHARD_VERSION:
                raise FormatError(f"unsupported shard version {version} in {path}")
            payload = fh.read()
        dtype = _sample_dtype(h, w)
        if len(payload) < count * dtype.itemsize:
            raise OSError(
                f"truncated shard {path}: {len(payload)} bytes for {count} samples"
            )
        record = np.frombuffer(payload, dtype=dtype, count=count)
        for i in range(count):
            label = MotionField(
                u=record[i]["label_u"].copy(),
                v=record[i]["label_v"].copy(),
                mask_u=TextureMask(
                    mask=record[i]["mask_u"].astype(bool),
                    direction="horizontal",
                    threshold_used=0.0,
                ),
                mask_v=TextureMask(
                    mask=record[i]["mask_v"].astype(bool),
                    direction="vertical",
                    threshold_used=0.0,
                ),
            )
            pairs.append(
                LabeledPair(
                    reference=Frame(record[i]["reference"].copy()),
                    current=Frame(record[i]["current"].copy(), timestamp_index=1),
                    label=label,
                    plan=None,
                    pair_index=len(pairs),
                )
            )
    return pairs


def stack_pairs(pairs: list) -> DatasetArrays:
    """Stack LabeledPairs into contiguous training tensors."""
    if not pairs:
        raise ParameterError("cannot stack an empty pair list")
    ref = np.stack([p.reference.data for p in pairs]).astype(np.float32)
    cur = np.stack([p.current.data for p in pairs]).astype(np.float32)
    labels = np.stack(
        [np.stack([p.label.u, p.label.v]) for p in pairs]
    ).astype(np.float32)
    masks = np.stack(
        [np.stack([p.label.mask_u.mask, p.label.mask_v.mask]) for p in pairs]
    ).astype(bool)
    return DatasetArrays(reference=ref, current=cur, labels=labels, masks=masks)


def load_arrays(directory) -> DatasetArrays:
    """Read a shard directory straight into training tensors."""
    return stack_pairs(read_shards(directory))


def build_dataset(
    video: FrameSequence,
    plans: list,
    frames_per_section: int,
    out_dir,
    engine: PhaseEngine | None = None,
    max_per_shard: int = SHARD_CAPACITY,
) -> dict:
    """Label every plan and persist shards per segment; returns count summary."""
    engine = engine or PhaseEngine()
    out = Path(out_dir)
    summary = {"segments": {}, "total_pairs": 0}
    for segment in sorted({p.segment for p in plans}):
        seg_plans = [p for p in plans if p.segment == segment]
        pairs = []
        for plan in seg_plans:
            pairs.extend(build_labeled_pairs(video, plan, frames_per_section, engine))
        shard_paths = write_shards(pairs, out / segment, max_per_shard)
        summary["segments"][segment] = {
            "plans": len(seg_plans),
            "pairs": len(pairs),
            "shards": [str(p) for p in shard_paths],
        }
        summary["total_pairs"] += len(pairs)
    return summary
