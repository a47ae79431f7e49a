"""Command-line pipeline: synthesize, extract, build data, train, evaluate.

Every subcommand writes a ``config.resolved.json`` into its output
directory recording the fully resolved parameters, and ``rerun`` replays
such a file.  Heavy imports happen inside handlers so ``--threads`` /
``--deterministic`` (or SUBFLOW_THREADS) can pin BLAS thread counts before
numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

VERSION = "0.1.0"

DEFAULT_SWEEP = (0.5, 1.0, 1.5, 2.0)

# Parameters whose defaults depend on the run profile.
PROFILES = {
    "full": {
        "synth": {"frames": 500},
        "dataset": {
            "sections": 10,
            "boxes_train": 100,
            "boxes_val": 30,
            "frames_per_section": 50,
        },
        "train": {"epochs": 2000},
    },
    "desk": {
        "synth": {"frames": 120},
        "dataset": {
            "sections": 3,
            "boxes_train": 8,
            "boxes_val": 3,
            "frames_per_section": 20,
        },
        "train": {"epochs": 60},
    },
}


def _parse_pixels(text):
    pixels = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        x, y = chunk.split(",")
        pixels.append((int(x), int(y)))
    return pixels


def _parse_widths(text):
    return tuple(int(v) for v in text.split(","))


def _write_config(out_dir: Path, command: str, params: dict) -> None:
    resolved = {}
    for key, value in sorted(params.items()):
        if isinstance(value, Path):
            value = str(value)
        if isinstance(value, tuple):
            value = list(value)
        resolved[key] = value
    payload = {"command": command, "version": VERSION, "parameters": resolved}
    with open(out_dir / "config.resolved.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(p: dict, command: str) -> Path:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, command, p)
    return out


def _auto_pixels(bound, count=3):
    """Pick well-textured pixels from a reference analysis."""
    import numpy as np

    mask = bound.mask_u.mask & bound.mask_v.mask
    if not mask.any():
        mask = bound.mask_u.mask | bound.mask_v.mask
    amp = bound.horizontal.amplitude + bound.vertical.amplitude
    scored = np.where(mask, amp, -np.inf)
    flat = np.argsort(scored, axis=None)[::-1][:count]
    ys, xs = np.unravel_index(flat, mask.shape)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


# ---------------------------------------------------------------------------
# handlers


def _cmd_synth(p: dict) -> int:
    from . import synthetic, video_io

    out = _prepare_out(p, "synth")
    texture = synthetic.generate_texture(
        p["seed"], p["width"], p["height"], p["texture"]
    )
    if p["motion"] == "damped-sine":
        signal = synthetic.damped_sine_signal(
            p["frames"],
            amplitude=p["amp"],
            frequency=p["freq"],
            frame_rate=p["frame_rate"],
            damping=p["damping"],
            axis=p["axis"],
        )
    else:
        signal = synthetic.static_signal(p["frames"])
    video, _ = synthetic.generate_vibration_sequence(
        texture,
        signal,
        frame_rate=p["frame_rate"],
        noise_sigma=p["noise"],
        noise_seed=p["seed"] + 1,
    )
    video_io.write_frames(video, out / "video.sfv")
    synthetic.write_signal_csv(signal, out / "signal.csv")
    print(f"synth: wrote {len(video)} frames to {out / 'video.sfv'}")
    return 0


def _extract_outputs(engine, video, p, out, signal=None):
    import numpy as np

    from . import eval as evaluation
    from . import report

    if p.get("pixels"):
        pixels = _parse_pixels(p["pixels"]) if isinstance(p["pixels"], str) else [
            tuple(px) for px in p["pixels"]
        ]
    else:
        from .phase_core import PhaseEngine

        probe = engine if isinstance(engine, PhaseEngine) else PhaseEngine()
        pixels = _auto_pixels(probe.reference(video[0]))
    histories = evaluation.extract_time_history(engine, video, pixels)
    evaluation.write_time_history_csv(histories, out / "time_histories.csv")
    truth = signal.samples if signal is not None else None
    report.plot_time_histories(
        histories, out / "time_histories.png", truth=truth, frame_rate=video.frame_rate
    )
    field = engine.motion(video[0], video[-1])
    for name, grid in (
        ("u", field.u),
        ("v", field.v),
        ("mask_u", field.mask_u.mask.astype(int)),
        ("mask_v", field.mask_v.mask.astype(int)),
    ):
        np.savetxt(out / f"field_{name}.csv", grid, delimiter=",")
    report.plot_motion_field(field, out / "field.png", title="last frame vs frame 0")
    return histories, field


def _cmd_extract(p: dict) -> int:
    from . import eval as evaluation
    from . import video_io
    from .phase_core import MaskConfig, PhaseEngine

    out = _prepare_out(p, "extract")
    video = video_io.load_frames(p["video"], p["format"])
    engine = PhaseEngine(
        wavelength=p["wavelength"],
        sigma=p["sigma"],
        kernel_size=p["kernel_size"],
        mask_cfg=MaskConfig(coefficient=p["threshold_coefficient"]),
    )
    _, field = _extract_outputs(engine, video, p, out)
    evaluation.write_metrics_json(
        {
            "frames": len(video),
            "masked_pixels_u": int(field.mask_u.mask.sum()),
            "masked_pixels_v": int(field.mask_v.mask.sum()),
            "threshold_u": field.mask_u.threshold_used,
            "threshold_v": field.mask_v.threshold_used,
        },
        out / "summary.json",
    )
    print(f"extract: wrote time histories and fields to {out}")
    return 0


def _cmd_dataset(p: dict) -> int:
    from . import dataset as ds
    from . import eval as evaluation
    from . import video_io
    from .phase_core import PhaseEngine

    out = _prepare_out(p, "dataset")
    video = video_io.load_frames(p["video"], p["format"])
    segments = ds.segment_ranges(video.width)
    boxes = {"train": p["boxes_train"], "validation": p["boxes_val"]}
    plans = ds.plan_crops(
        (video.width, video.height),
        segments,
        p["sections"],
        boxes,
        seed=p["seed"],
        box_size=p["box_size"],
        include_flipped=not p["no_flip"],
    )
    summary = ds.build_dataset(
        video, plans, p["frames_per_section"], out, engine=PhaseEngine()
    )
    summary["segment_ranges"] = {k: list(v) for k, v in segments.items()}
    evaluation.write_metrics_json(summary, out / "dataset_summary.json")
    print(
        f"dataset: {summary['total_pairs']} labeled pairs across "
        f"{len(summary['segments'])} segments in {out}"
    )
    return 0


def _cmd_train(p: dict) -> int:
    from . import dataset as ds
    from . import eval as evaluation
    from . import nn, report
    from . import train as training

    out = _prepare_out(p, "train")
    data_dir = Path(p["data"])
    train_data = ds.load_arrays(data_dir / "train")
    val_data = ds.load_arrays(data_dir / "validation")
    cfg = training.TrainConfig(
        variant=p["variant"],
        widths=_parse_widths(p["widths"]) if isinstance(p["widths"], str) else (
            tuple(p["widths"]) if p["widths"] else None
        ),
        share_streams=p["share_streams"],
        batch_size=p["batch_size"],
        learning_rate=p["lr"],
        epochs=p["epochs"],
        seed=p["seed"],
        mask_loss_enabled=not p["no_mask_loss"],
        sparse_norm=p["sparse_norm"],
    )
    state = training.train(train_data, val_data, cfg, out)
    log = training.read_log(out / "train_log.csv")
    report.plot_training_curves(log, out / "training_curves.png")
    evaluation.write_metrics_json(
        {
            "variant": cfg.variant,
            "parameter_count": nn.count_params(state.params),
            "epochs": cfg.epochs,
            "train_pairs": int(train_data.reference.shape[0]),
            "val_pairs": int(val_data.reference.shape[0]),
            "best_validation_loss": state.best_validation_loss,
            "checkpoint": state.best_checkpoint_path,
        },
        out / "train_summary.json",
    )
    print(
        f"train: best validation loss {state.best_validation_loss:.6f}, "
        f"checkpoint at {state.best_checkpoint_path}"
    )
    return 0


def _cmd_infer(p: dict) -> int:
    from . import eval as evaluation
    from . import nn, video_io

    out = _prepare_out(p, "infer")
    params = nn.load_checkpoint(p["checkpoint"])
    video = video_io.load_frames(p["video"], p["format"])
    engine = evaluation.NetworkEngine(params)
    _extract_outputs(engine, video, p, out)
    evaluation.write_metrics_json(
        {
            "frames": len(video),
            "variant": params.variant,
            "parameter_count": nn.count_params(params),
        },
        out / "summary.json",
    )
    print(f"infer: wrote network time histories and fields to {out}")
    return 0


def _cmd_eval(p: dict) -> int:
    import numpy as np

    from . import eval as evaluation
    from . import nn, report, synthetic, video_io
    from .phase_core import PhaseEngine, uniform_motion_field

    out = _prepare_out(p, "eval")
    params = nn.load_checkpoint(p["checkpoint"])
    video = video_io.load_frames(p["video"], p["format"])
    signal = synthetic.read_signal_csv(p["signal"])
    if len(signal) != len(video):
        from .errors import ParameterError

        raise ParameterError(
            f"signal has {len(signal)} samples but the video has {len(video)} frames"
        )
    net = evaluation.NetworkEngine(params)
    phase = PhaseEngine()
    bound = phase.reference(video[0])

    n_eval = min(p["eval_frames"], len(video) - 1)
    frame_ids = np.unique(np.linspace(1, len(video) - 1, n_eval).astype(int))
    rows = {"net": {"masked": [], "interior": [], "full": []}, "phase": {"masked": []}}
    last_pred = None
    for t in frame_ids:
        truth = uniform_motion_field(
            (video.height, video.width),
            signal.samples[t, 0],
            signal.samples[t, 1],
            masks=(bound.mask_u, bound.mask_v),
        )
        pred = net.motion(video[0], video[t])
        last_pred = (pred, truth)
        for region in ("masked", "interior", "full"):
            rows["net"][region].append(evaluation.evaluate_mae(pred, truth, region))
        rows["phase"]["masked"].append(
            evaluation.evaluate_mae(phase.motion(video[0], video[t]), truth, "masked")
        )

    metrics = {"frames_evaluated": [int(t) for t in frame_ids]}
    for engine_name, regions in rows.items():
        for region, results in regions.items():
            metrics[f"{engine_name}_mae_{region}_u"] = float(
                np.mean([r.u for r in results])
            )
            metrics[f"{engine_name}_mae_{region}_v"] = float(
                np.mean([r.v for r in results])
            )

    pred, truth = last_pred
    sweeps = [
        evaluation.threshold_sweep(
            pred,
            truth,
            bound.horizontal.amplitude if d == "u" else bound.vertical.amplitude,
            p["sweep_coefficients"],
            direction=d,
        )
        for d in ("u", "v")
    ]
    evaluation.write_sweep_csv(sweeps, out / "sweep.csv")
    report.plot_threshold_sweep(sweeps, out / "sweep.png")
    metrics["sweep"] = {
        s.direction: {
            "coefficients": list(s.coefficients),
            "mae": list(s.mae_per_c),
            "pixel_counts": list(s.pixel_counts),
        }
        for s in sweeps
    }
    evaluation.write_metrics_json(metrics, out / "metrics.json")
    print(
        f"eval: masked MAE u={metrics['net_mae_masked_u']:.4f} "
        f"v={metrics['net_mae_masked_v']:.4f} px over {len(frame_ids)} frames"
    )
    return 0


def _cmd_bench(p: dict) -> int:
    from . import eval as evaluation
    from . import nn

    out = _prepare_out(p, "bench")
    if p["checkpoint"]:
        params = nn.load_checkpoint(p["checkpoint"])
    else:
        params = nn.init_network(p["variant"], seed=p["seed"])
    result = evaluation.benchmark_inference(params, n_pairs=p["pairs"], seed=p["seed"])
    evaluation.write_metrics_json(
        {
            "variant": params.variant,
            "parameter_count": nn.count_params(params),
            "net_ms_per_pair": result.net_ms_per_pair,
            "net_pairs_per_second": result.net_pairs_per_second,
            "phase_ms_per_pair": result.phase_ms_per_pair,
            "phase_pairs_per_second": result.phase_pairs_per_second,
            "speed_ratio_phase_over_net": result.speed_ratio,
            "n_pairs": result.n_pairs,
        },
        out / "bench.json",
    )
    print(
        f"bench: net {result.net_ms_per_pair:.2f} ms/pair, "
        f"phase {result.phase_ms_per_pair:.2f} ms/pair "
        f"(ratio {result.speed_ratio:.2f}) over {result.n_pairs} pairs"
    )
    return 0


def _cmd_rerun(p: dict) -> int:
    with open(p["config"]) as fh:
        stored = json.load(fh)
    command = stored.get("command")
    if command not in _HANDLERS or command == "rerun":
        raise SystemExit(f"config {p['config']} has no rerunnable command")
    return _HANDLERS[command](stored["parameters"])


_HANDLERS = {
    "synth": _cmd_synth,
    "extract": _cmd_extract,
    "dataset": _cmd_dataset,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "rerun": _cmd_rerun,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subflow",
        description="Phase-based subpixel displacement extraction and "
        "SubFlowNet training on synthetic video.",
    )
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="force single-threaded numerics for bitwise reproducibility",
    )
    parser.add_argument(
        "--profile",
        choices=sorted(PROFILES),
        default="desk",
        help="parameter scale for unset options (default: desk)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=f"{name}_out")
        return sp

    sp = add("synth", "generate a synthetic vibration video plus ground truth")
    sp.add_argument("--width", type=int, default=480)
    sp.add_argument("--height", type=int, default=96)
    sp.add_argument("--frames", type=int, default=None)
    sp.add_argument("--texture", choices=("filtered_noise", "bars", "blobs"),
                    default="filtered_noise")
    sp.add_argument("--motion", choices=("damped-sine", "static"), default="damped-sine")
    sp.add_argument("--amp", type=float, default=0.5)
    sp.add_argument("--freq", type=float, default=6.0)
    sp.add_argument("--frame-rate", type=float, default=1500.0)
    sp.add_argument("--damping", type=float, default=0.02)
    sp.add_argument("--axis", choices=("x", "y", "both"), default="x")
    sp.add_argument("--noise", type=float, default=0.0)

    sp = add("extract", "phase-based displacement fields and time histories")
    sp.add_argument("--video", required=True)
    sp.add_argument("--format", choices=("raw_f32", "pgm_sequence"), default="raw_f32")
    sp.add_argument("--pixels", default=None, help="semicolon-separated x,y pairs")
    sp.add_argument("--wavelength", type=float, default=8.0)
    sp.add_argument("--sigma", type=float, default=2.0)
    sp.add_argument("--kernel-size", type=int, default=9)
    sp.add_argument("--threshold-coefficient", type=float, default=1.0)

    sp = add("dataset", "build labeled training shards from a video")
    sp.add_argument("--video", required=True)
    sp.add_argument("--format", choices=("raw_f32", "pgm_sequence"), default="raw_f32")
    sp.add_argument("--sections", type=int, default=None)
    sp.add_argument("--boxes-train", type=int, default=None)
    sp.add_argument("--boxes-val", type=int, default=None)
    sp.add_argument("--frames-per-section", type=int, default=None)
    sp.add_argument("--box-size", type=int, default=96)
    sp.add_argument("--no-flip", action="store_true",
                    help="skip the transposed-video plans")

    sp = add("train", "train a SubFlowNet on labeled shards")
    sp.add_argument("--data", required=True, help="dataset dir with train/ validation/")
    sp.add_argument("--variant", choices=("SubFlowNetS", "SubFlowNetC"),
                    default="SubFlowNetC")
    sp.add_argument("--widths", default=None, help="encoder channel counts, e.g. 8,8,16,16")
    sp.add_argument("--share-streams", action="store_true")
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--lr", type=float, default=0.001)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--no-mask-loss", action="store_true",
                    help="drop the sparse loss term (ablation)")
    sp.add_argument("--sparse-norm", choices=("per_pixel", "per_masked"),
                    default="per_pixel")

    sp = add("infer", "network displacement fields and time histories")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--video", required=True)
    sp.add_argument("--format", choices=("raw_f32", "pgm_sequence"), default="raw_f32")
    sp.add_argument("--pixels", default=None)

    sp = add("eval", "score a checkpoint against synthetic ground truth")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--video", required=True)
    sp.add_argument("--format", choices=("raw_f32", "pgm_sequence"), default="raw_f32")
    sp.add_argument("--signal", required=True, help="ground-truth motion CSV")
    sp.add_argument("--eval-frames", type=int, default=50)
    sp.add_argument("--sweep-coefficients", type=float, nargs="+",
                    default=list(DEFAULT_SWEEP))

    sp = add("bench", "time network vs phase-engine inference")
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--variant", choices=("SubFlowNetS", "SubFlowNetC"),
                    default="SubFlowNetC")
    sp.add_argument("--pairs", type=int, default=100)

    sp = sub.add_parser("rerun", help="replay a config.resolved.json")
    sp.add_argument("config")

    return parser


def _apply_profile(args: argparse.Namespace) -> None:
    table = PROFILES[args.profile].get(args.command, {})
    for key, value in table.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)


def _configure_threads(args: argparse.Namespace) -> None:
    threads = args.threads
    if threads is None:
        env = os.environ.get("SUBFLOW_THREADS")
        threads = int(env) if env else None
    if args.deterministic:
        threads = 1
    if threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_threads(args)
    _apply_profile(args)
    params = {
        k: v
        for k, v in vars(args).items()
        if k not in ("command", "threads", "deterministic")
    }
    handler = _HANDLERS[args.command]

    from .errors import SubflowError

    try:
        return handler(params)
    except SubflowError as exc:
        print(f"subflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"subflow {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
