"""Crop planning, label generation, and the binary shard format."""

import numpy as np
import pytest

from subflow import dataset, phase_core, synthetic, video_io
from subflow.dataset import (
    CropPlan,
    build_dataset,
    build_labeled_pairs,
    load_arrays,
    plan_crops,
    read_shards,
    segment_ranges,
    stack_pairs,
    write_shards,
)
from subflow.errors import DimensionError, FormatError, ParameterError


class TestSegmentRanges:
    def test_default_split(self):
        ranges = segment_ranges(480)
        assert ranges == {
            "train": (0, 288),
            "validation": (288, 384),
            "test": (384, 480),
        }

    def test_covers_width_without_overlap(self):
        ranges = segment_ranges(101)
        assert ranges["train"][0] == 0
        assert ranges["train"][1] == ranges["validation"][0]
        assert ranges["validation"][1] == ranges["test"][0]
        assert ranges["test"][1] == 101

    def test_fraction_validation(self):
        with pytest.raises(ParameterError):
            segment_ranges(100, fractions=(0.5, 0.3))
        with pytest.raises(ParameterError):
            segment_ranges(100, fractions=(0.5, 0.3, 0.3))


class TestPlanCrops:
    def test_counts_and_determinism(self):
        segments = {"train": (0, 160), "validation": (160, 240)}
        boxes = {"train": 3, "validation": 2}
        plans = plan_crops((240, 100), segments, 4, boxes, seed=5, box_size=64)
        assert len(plans) == 4 * (3 + 2) * 2
        again = plan_crops((240, 100), segments, 4, boxes, seed=5, box_size=64)
        assert plans == again
        assert plans != plan_crops((240, 100), segments, 4, boxes, seed=6, box_size=64)

    def test_boxes_respect_segment_and_frame(self):
        segments = {"train": (40, 160)}
        plans = plan_crops((240, 100), segments, 3, {"train": 5}, seed=0, box_size=64)
        for plan in plans:
            x0, y0, bw, bh = plan.box
            assert (bw, bh) == (64, 64)
            if plan.source == "original":
                assert 40 <= x0 and x0 + bw <= 160
                assert 0 <= y0 and y0 + bh <= 100
            else:
                # transposed geometry: the segment range constrains rows
                assert 0 <= x0 and x0 + bw <= 100
                assert 40 <= y0 and y0 + bh <= 160

    def test_no_flip_halves_plans(self):
        segments = {"train": (0, 160)}
        full = plan_crops((240, 100), segments, 2, {"train": 3}, box_size=64)
        original_only = plan_crops(
            (240, 100), segments, 2, {"train": 3}, box_size=64, include_flipped=False
        )
        assert len(original_only) == len(full) // 2
        assert all(p.source == "original" for p in original_only)

    def test_validation(self):
        segments = {"train": (0, 60)}
        with pytest.raises(ParameterError):
            plan_crops((240, 100), segments, 2, {"train": 1}, box_size=64)
        with pytest.raises(ParameterError):
            plan_crops((240, 100), {"train": (0, 160)}, 0, {"train": 1}, box_size=64)
        with pytest.raises(ParameterError):
            plan_crops((240, 100), {"train": (0, 160)}, 2, {"other": 1}, box_size=64)


@pytest.fixture(scope="module")
def labeled_video():
    """Video with known uniform shifts; labels live at half resolution."""
    from conftest import upsample2

    source = upsample2(synthetic.generate_texture(21, width=120, height=56).data)
    shifts = [(0.0, 0.0), (0.8, -0.4), (-0.6, 0.6), (0.4, 0.9)]
    frames = [
        synthetic.subpixel_shift(video_io.Frame(source, timestamp_index=i), dx, dy)
        for i, (dx, dy) in enumerate(shifts)
    ]
    frames = [
        video_io.Frame(f.data, timestamp_index=i) for i, f in enumerate(frames)
    ]
    return video_io.FrameSequence(tuple(frames), frame_rate=100.0), shifts


class TestBuildLabeledPairs:
    def test_pair_count_and_shapes(self, labeled_video):
        video, _ = labeled_video
        plan = CropPlan(segment="train", section_index=0, box=(8, 4, 32, 32))
        pairs = build_labeled_pairs(video, plan, 4)
        assert len(pairs) == 3
        for i, pair in enumerate(pairs):
            assert pair.reference.data.shape == (16, 16)
            assert pair.current.data.shape == (16, 16)
            assert pair.reference.data.dtype == np.float32
            assert pair.pair_index == i + 1
            assert pair.plan is plan

    def test_labels_are_half_the_source_shift(self, labeled_video):
        video, shifts = labeled_video
        plan = CropPlan(segment="train", section_index=0, box=(16, 4, 48, 48))
        pairs = build_labeled_pairs(video, plan, 4)
        for pair, (dx, dy) in zip(pairs, shifts[1:]):
            mu = pair.label.mask_u.mask
            mv = pair.label.mask_v.mask
            assert mu.sum() > 40 and mv.sum() > 40
            assert abs(np.median(pair.label.u[mu]) - dx / 2) < 0.12
            assert abs(np.median(pair.label.v[mv]) - dy / 2) < 0.12

    def test_flipped_source_swaps_axes(self, labeled_video):
        video, shifts = labeled_video
        plan = CropPlan(
            segment="train", section_index=0, box=(4, 16, 48, 48), source="flipped"
        )
        pairs = build_labeled_pairs(video, plan, 4)
        for pair, (dx, dy) in zip(pairs, shifts[1:]):
            mu = pair.label.mask_u.mask
            mv = pair.label.mask_v.mask
            # transposing swaps the roles: u sees dy, v sees dx
            assert abs(np.median(pair.label.u[mu]) - dy / 2) < 0.12
            assert abs(np.median(pair.label.v[mv]) - dx / 2) < 0.12

    def test_section_beyond_video_rejected(self, labeled_video):
        video, _ = labeled_video
        plan = CropPlan(segment="train", section_index=1, box=(8, 4, 32, 32))
        with pytest.raises(ParameterError):
            build_labeled_pairs(video, plan, 4)

    def test_box_outside_frame_rejected(self, labeled_video):
        video, _ = labeled_video
        plan = CropPlan(segment="train", section_index=0, box=(220, 4, 32, 32))
        with pytest.raises(DimensionError):
            build_labeled_pairs(video, plan, 4)


@pytest.fixture(scope="module")
def some_pairs(labeled_video):
    video, _ = labeled_video
    plans = [
        CropPlan(segment="train", section_index=0, box=(8, 0, 32, 32)),
        CropPlan(segment="train", section_index=0, box=(30, 8, 32, 32)),
    ]
    pairs = []
    engine = phase_core.PhaseEngine()
    for plan in plans:
        pairs.extend(build_labeled_pairs(video, plan, 4, engine))
    return pairs


class TestShards:
    def test_roundtrip_bitwise(self, tmp_path, some_pairs):
        paths = write_shards(some_pairs, tmp_path)
        assert len(paths) == 1
        back = read_shards(tmp_path)
        assert len(back) == len(some_pairs)
        a = stack_pairs(some_pairs)
        b = stack_pairs(back)
        np.testing.assert_array_equal(a.reference, b.reference)
        np.testing.assert_array_equal(a.current, b.current)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.masks, b.masks)

    def test_capacity_splits_files(self, tmp_path, some_pairs):
        paths = write_shards(some_pairs, tmp_path, max_per_shard=4)
        assert len(paths) == 2
        assert len(read_shards(tmp_path)) == len(some_pairs)

    def test_bad_magic_rejected(self, tmp_path, some_pairs):
        write_shards(some_pairs, tmp_path)
        shard = next(tmp_path.glob("*.sfds"))
        blob = shard.read_bytes()
        shard.write_bytes(b"NOPE" + blob[4:])
        with pytest.raises(FormatError):
            read_shards(tmp_path)

    def test_unknown_version_rejected(self, tmp_path, some_pairs):
        write_shards(some_pairs, tmp_path)
        shard = next(tmp_path.glob("*.sfds"))
        blob = bytearray(shard.read_bytes())
        blob[4] = 99
        shard.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_shards(tmp_path)

    def test_truncation_detected(self, tmp_path, some_pairs):
        write_shards(some_pairs, tmp_path)
        shard = next(tmp_path.glob("*.sfds"))
        blob = shard.read_bytes()
        shard.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(OSError):
            read_shards(tmp_path)

    def test_empty_directory_reads_empty(self, tmp_path):
        assert read_shards(tmp_path) == []

    def test_stack_empty_rejected(self):
        with pytest.raises(ParameterError):
            stack_pairs([])


class TestBuildDataset:
    def test_summary_and_load(self, tmp_path, labeled_video):
        video, _ = labeled_video
        segments = {"train": (0, 144), "validation": (144, 240)}
        plans = plan_crops(
            (240, 112), segments, 1, {"train": 2, "validation": 1},
            seed=3, box_size=32,
        )
        summary = build_dataset(video, plans, 4, tmp_path)
        assert summary["total_pairs"] == len(plans) * 3
        assert set(summary["segments"]) == {"train", "validation"}
        assert summary["segments"]["train"]["plans"] == 4
        assert summary["segments"]["train"]["pairs"] == 12
        data = load_arrays(tmp_path / "train")
        assert data.reference.shape == (12, 16, 16)
        assert data.labels.shape == (12, 2, 16, 16)
        assert data.masks.dtype == bool
