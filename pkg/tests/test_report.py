"""Figure rendering: each writer must produce a PNG without a display."""

import numpy as np
import pytest

from subflow import report
from subflow.eval import SweepResult, TimeHistory
from subflow.phase_core import MotionField, TextureMask

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def assert_is_png(path):
    assert path.exists()
    assert path.read_bytes()[:8] == PNG_MAGIC


@pytest.fixture
def histories():
    frames = np.arange(5, dtype=float)
    return [
        TimeHistory(pixel=(2, 3),
                    samples=np.stack([frames, 0.1 * frames, -0.1 * frames], axis=1)),
        TimeHistory(pixel=(7, 1),
                    samples=np.stack([frames, 0.2 * frames, 0.05 * frames], axis=1)),
    ]


class TestTimeHistoryPlot:
    def test_basic(self, tmp_path, histories):
        out = report.plot_time_histories(histories, tmp_path / "hist.png")
        assert_is_png(out)

    def test_with_truth_and_frame_rate(self, tmp_path, histories):
        truth = np.stack([0.1 * np.arange(5), -0.1 * np.arange(5)], axis=1)
        out = report.plot_time_histories(
            histories, tmp_path / "hist.png", truth=truth, frame_rate=100.0)
        assert_is_png(out)


class TestMotionFieldPlot:
    def test_heatmaps(self, tmp_path, rng):
        mask = rng.random((12, 12)) < 0.4
        field = MotionField(
            u=rng.standard_normal((12, 12)) * 0.1,
            v=rng.standard_normal((12, 12)) * 0.1,
            mask_u=TextureMask(mask, "horizontal", 0.2),
            mask_v=TextureMask(mask, "vertical", 0.2),
        )
        out = report.plot_motion_field(field, tmp_path / "field.png", title="probe")
        assert_is_png(out)

    def test_all_zero_field(self, tmp_path):
        zero = np.zeros((8, 8))
        mask = np.ones((8, 8), bool)
        field = MotionField(
            u=zero, v=zero,
            mask_u=TextureMask(mask, "horizontal", 0.0),
            mask_v=TextureMask(mask, "vertical", 0.0),
        )
        assert_is_png(report.plot_motion_field(field, tmp_path / "zero.png"))


class TestSweepPlot:
    def test_with_nan_entries(self, tmp_path):
        sweeps = [
            SweepResult(coefficients=(0.5, 1.0, 1.5, 2.0),
                        mae_per_c=(0.08, 0.06, 0.05, float("nan")),
                        pixel_counts=(400, 300, 150, 0),
                        direction="u"),
            SweepResult(coefficients=(0.5, 1.0, 1.5, 2.0),
                        mae_per_c=(0.09, 0.07, 0.06, 0.05),
                        pixel_counts=(380, 280, 140, 60),
                        direction="v"),
        ]
        assert_is_png(report.plot_threshold_sweep(sweeps, tmp_path / "sweep.png"))


class TestTrainingCurvesPlot:
    def test_from_log_dict(self, tmp_path):
        epochs = np.arange(1, 11, dtype=float)
        log = {
            "epoch": epochs,
            "train_total": 1.0 / epochs,
            "val_total": 1.1 / epochs,
            "train_full": 0.5 / epochs,
            "val_full": 0.55 / epochs,
        }
        assert_is_png(report.plot_training_curves(log, tmp_path / "curves.png"))
