"""Batch command-line front end.

Subcommands wire the library into reproducible experiments:

    vislam simulate --config sim.json --out DIR
    vislam init     --dataset DIR [--init-window-sec 15] --out DIR
    vislam run      --dataset DIR --mode slam|odometry|localization [--full-ba] --out DIR
    vislam eval     --est traj.tum --gt traj.tum --out DIR

Every command writes a manifest.json capturing its inputs, so reruns are
reproducible; all randomness is seeded through configuration, never from
the wall clock. Exit codes: 0 success, 1 usage or configuration error,
2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import dataio
from .errors import (
    DataFormatError,
    DegenerateMotionError,
    InsufficientDataError,
    InvalidModelError,
    NumericalFailureError,
    TrackingLostError,
    VislamError,
)
from .evaluation import Trajectory, evaluate_pair, metrics_csv, rpe_plot_csv
from .initializer import (
    InitializationInput,
    KeyframeVisualPose,
    run_full_initialization,
    serialize_result,
)
from .pipeline import PipelineConfig, SequenceSource, run_pipeline
from .preintegration import ImuBias, ImuNoiseModel, euroc_noise_model, preintegrate
from .simulator import SimConfig, TrajectoryModel, generate

OUTPUT_ROOT_ENV = "VISLAM_OUT_ROOT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

TRAJECTORY_PRESETS = {
    "hover": dict(kind="hover", duration=20.0),
    "circle": dict(
        kind="circle",
        duration=30.0,
        radius=2.0,
        angular_rate=0.5,
        attitude="yaw_follow",
        wobble_amplitude=[0.08, 0.1, 0.0],
        wobble_rate=[0.9, 0.7, 0.0],
    ),
    "lissajous": dict(
        kind="lissajous",
        duration=30.0,
        amplitudes=[2.0, 1.5, 0.8],
        rates=[0.9, 1.3, 0.7],
        phases=[0.0, 1.1, 2.3],
        attitude="fixed",
        wobble_amplitude=[0.25, 0.3, 0.6],
        wobble_rate=[0.8, 0.6, 0.4],
    ),
    "figure8": dict(
        kind="lissajous",
        duration=38.0,
        amplitudes=[4.0, 1.8, 0.3],
        rates=[0.5, 1.0, 1.0],
        phases=[0.0, 0.6, 1.1],
        attitude="yaw_follow",
        wobble_amplitude=[0.06, 0.08, 0.0],
        wobble_rate=[0.9, 0.7, 0.0],
    ),
}

_VECTOR_MODEL_KEYS = (
    "center",
    "start",
    "velocity",
    "amplitudes",
    "rates",
    "phases",
    "fixed_rpy",
    "wobble_amplitude",
    "wobble_rate",
    "wobble_phase",
    "waypoints",
    "waypoint_times",
)


class UsageError(VislamError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # raise instead of sys.exit(2)
        raise UsageError(message)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve_out(out: str | None, default_name: str) -> str:
    if out is None:
        root = os.environ.get(OUTPUT_ROOT_ENV, ".")
        out = os.path.join(root, default_name)
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out_dir: str, command: str, args: dict, input_paths: list[str]) -> None:
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in sorted(args.items()) if not callable(v)},
        "input_hashes": {p: _sha256_file(p) for p in sorted(input_paths) if os.path.isfile(p)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model_from_config(cfg: dict) -> TrajectoryModel:
    kwargs = dict(cfg)
    for key in _VECTOR_MODEL_KEYS:
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = np.asarray(kwargs[key], dtype=float)
    return TrajectoryModel(**kwargs)


def _sim_config_from_dict(cfg: dict, seed: int | None) -> SimConfig:
    kwargs = dict(cfg)
    if "noise" in kwargs:
        kwargs["noise"] = ImuNoiseModel(**kwargs["noise"])
    if "bias" in kwargs:
        kwargs["bias"] = ImuBias(
            np.asarray(kwargs["bias"].get("gyro", [0, 0, 0]), dtype=float),
            np.asarray(kwargs["bias"].get("accel", [0, 0, 0]), dtype=float),
        )
    if seed is not None:
        kwargs["seed"] = seed
    return SimConfig(**kwargs)


def cmd_simulate(args) -> int:
    if args.config is None and args.preset is None:
        raise UsageError("simulate needs --config or --preset")
    model_cfg: dict = {}
    sim_cfg: dict = {}
    inputs = []
    if args.preset is not None:
        if args.preset not in TRAJECTORY_PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; have {sorted(TRAJECTORY_PRESETS)}")
        model_cfg = dict(TRAJECTORY_PRESETS[args.preset])
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        model_cfg.update(doc.get("trajectory", {}))
        sim_cfg.update(doc.get("simulation", {}))
        inputs.append(args.config)
    model = _model_from_config(model_cfg)
    sim = _sim_config_from_dict(sim_cfg, args.seed)
    data = generate(model, sim)
    out = _resolve_out(args.out, "dataset")
    dataio.write_euroc_dataset(data, out)
    _write_manifest(out, "simulate", vars(args), inputs)
    n_imu = data.imu_times.shape[0]
    print(f"wrote dataset to {out}: {n_imu} IMU rows, {len(data.frames)} frames, "
          f"{len(data.loop_edges)} loop edges")
    return EXIT_OK


def cmd_init(args) -> int:
    bundle = dataio.load_euroc_dataset(args.dataset, calib_path=args.calib)
    source = SequenceSource.from_dataset(bundle)
    out = _resolve_out(args.out, "init")

    # subsample keyframes to the replay spacing, then preintegrate each
    # consecutive pair once; growing windows reuse the cached segments
    keep = []
    last = -np.inf
    for k, t in enumerate(source.kf_times):
        if t - last >= args.kf_interval - 1e-9:
            keep.append(k)
            last = t
    kf_times = source.kf_times[keep]
    if kf_times.shape[0] < 4:
        raise InsufficientDataError("need at least 4 keyframes")
    keyframes = [
        KeyframeVisualPose(
            id=i,
            timestamp=float(kf_times[i]),
            r_wc=source.kf_rotations_wc[keep[i]],
            p_wc=source.kf_positions_vis[keep[i]],
        )
        for i in range(kf_times.shape[0])
    ]
    pres = []
    for a, b in zip(keyframes, keyframes[1:]):
        ms, dts = source.imu_segment(a.timestamp, b.timestamp)
        pres.append(preintegrate(ms, dts, source.noise))

    rows = []
    timing_rows = []
    final_record = None
    for count in range(4, kf_times.shape[0] + 1):
        inp = InitializationInput(
            keyframes[:count], pres[: count - 1], source.t_cb,
            source.noise.gravity_magnitude,
        )
        t0 = time.perf_counter()
        try:
            result = run_full_initialization(inp)
        except (DegenerateMotionError, NumericalFailureError):
            continue
        elapsed = time.perf_counter() - t0
        window_sec = kf_times[count - 1] - kf_times[0]
        rows.append(
            (
                count,
                window_sec,
                result.scale,
                *result.gyro_bias,
                *result.accel_bias,
                result.condition_number_stage2,
                result.condition_number_stage3,
            )
        )
        timing_rows.append((count, window_sec, elapsed))
        if final_record is None and window_sec >= args.init_window_sec:
            final_record = result
    if final_record is None and rows:
        final_record = result

    with open(os.path.join(out, "convergence.csv"), "w", encoding="utf-8") as fh:
        fh.write(
            "n_keyframes,window_sec,scale,gyro_bias_x,gyro_bias_y,gyro_bias_z,"
            "accel_bias_x,accel_bias_y,accel_bias_z,cond_stage2,cond_stage3\n"
        )
        for row in rows:
            fh.write(",".join(f"{v:.12g}" for v in row) + "\n")
    # wall-clock timings are inherently non-reproducible, kept separate so
    # every other artifact is bit-identical across reruns
    with open(os.path.join(out, "timing.csv"), "w", encoding="utf-8") as fh:
        fh.write("n_keyframes,window_sec,solve_time_sec\n")
        for row in timing_rows:
            fh.write(",".join(f"{v:.12g}" for v in row) + "\n")
    if final_record is not None:
        with open(os.path.join(out, "init_result.txt"), "w", encoding="utf-8") as fh:
            fh.write(serialize_result(final_record))
    _write_manifest(out, "init", vars(args), _dataset_inputs(args.dataset, args.calib))
    print(f"wrote {len(rows)} initialization windows to {out}")
    return EXIT_OK




def _dataset_inputs(dataset: str, calib: str | None) -> list[str]:
    paths = []
    for sub in (
        "mav0/imu0/data.csv",
        "mav0/state_groundtruth_estimate0/data.csv",
        "mav0/keyframes0/data.csv",
        "mav0/cam0/observations.csv",
        "mav0/loops0/data.csv",
        "calibration.txt",
    ):
        p = os.path.join(dataset, sub)
        if os.path.isfile(p):
            paths.append(p)
    if calib and os.path.isfile(calib):
        paths.append(calib)
    return paths


def cmd_run(args) -> int:
    bundle = dataio.load_euroc_dataset(args.dataset, calib_path=args.calib)
    source = SequenceSource.from_dataset(bundle)
    config = PipelineConfig(
        mode=args.mode,
        init_window_sec=args.init_window_sec,
        n_local=args.local_window,
        final_full_ba=args.full_ba,
    )
    result = run_pipeline(source, config)
    out = _resolve_out(args.out, f"run_{args.mode}")
    dataio.write_trajectory_tum(result.keyframe_poses, os.path.join(out, "keyframes.tum"))
    dataio.write_trajectory_tum(result.frame_poses, os.path.join(out, "frames.tum"))
    report = {
        "mode": args.mode,
        "keyframes": len(result.keyframe_poses),
        "frames": len(result.frame_poses),
        "landmarks": len(result.graph.landmarks),
        "tracking_lost_at": result.tracking_lost_at,
        "events": result.events,
        "init_scale": result.init_result.scale,
        "init_condition_number_stage3": result.init_result.condition_number_stage3,
    }
    with open(os.path.join(out, "run_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "run", vars(args), _dataset_inputs(args.dataset, args.calib))
    print(f"wrote trajectories to {out} ({len(result.keyframe_poses)} keyframes)")
    if result.tracking_lost_at is not None:
        print(f"tracking lost at t={result.tracking_lost_at:.3f}; partial trajectory written")
    return EXIT_OK


def _load_trajectory(path: str) -> Trajectory:
    if path.endswith(".csv"):
        records = dataio.read_groundtruth_csv(path)
        origin = records[0].timestamp_ns
        rots = None
        if all(r.rotation is not None for r in records):
            rots = np.stack([r.rotation for r in records])
        return Trajectory(
            np.array([(r.timestamp_ns - origin) / 1e9 for r in records]),
            np.stack([r.position for r in records]),
            rots,
        )
    return dataio.trajectory_from_tum(dataio.read_trajectory_tum(path))


def cmd_eval(args) -> int:
    est = _load_trajectory(args.est)
    gt = _load_trajectory(args.gt)
    if args.time_offset:
        gt = Trajectory(gt.times + args.time_offset, gt.positions, gt.rotations)
    deltas = tuple(float(x) for x in args.rpe_deltas.split(",")) if args.rpe_deltas else ()
    result = evaluate_pair(
        est,
        gt,
        max_dt=args.max_dt,
        fix_scale=args.fix_scale,
        rpe_deltas=deltas or (5.0, 10.0, 15.0, 20.0, 25.0, 30.0),
    )
    out = _resolve_out(args.out, "eval")
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(metrics_csv(result))
    if "rpe" in result:
        with open(os.path.join(out, "rpe_plot.csv"), "w", encoding="utf-8") as fh:
            fh.write(rpe_plot_csv(result["rpe"]))
    _write_manifest(out, "eval", vars(args), [args.est, args.gt])
    print(
        f"ATE-RMSE {result['ate_rmse']:.6f} m, scale error "
        f"{result['scale_error_percent']:.3f}% over {result['matches']} matches"
    )
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="vislam", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--config", help="JSON file with trajectory/simulation sections")
    p_sim.add_argument("--preset", help=f"named trajectory: {', '.join(sorted(TRAJECTORY_PRESETS))}")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", help="output dataset directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_init = sub.add_parser("init", help="growing-window inertial initialization replay")
    p_init.add_argument("--dataset", required=True)
    p_init.add_argument("--calib", help="calibration file (defaults to dataset/calibration.txt)")
    p_init.add_argument("--init-window-sec", type=float, default=15.0)
    p_init.add_argument("--kf-interval", type=float, default=0.25,
                        help="keyframe replay spacing in seconds")
    p_init.add_argument("--out")
    p_init.set_defaults(func=cmd_init)

    p_run = sub.add_parser("run", help="full pipeline over a dataset")
    p_run.add_argument("--dataset", required=True)
    p_run.add_argument("--calib")
    p_run.add_argument("--mode", choices=("slam", "odometry", "localization"), default="slam")
    p_run.add_argument("--full-ba", action="store_true", help="final full bundle adjustment")
    p_run.add_argument("--init-window-sec", type=float, default=15.0)
    p_run.add_argument("--local-window", type=int, default=10)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--out")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="trajectory metrics against ground truth")
    p_eval.add_argument("--est", required=True, help="TUM trajectory file")
    p_eval.add_argument("--gt", required=True, help="TUM file or EuRoC ground-truth CSV")
    p_eval.add_argument("--max-dt", type=float, default=0.02)
    p_eval.add_argument("--fix-scale", action="store_true", help="rigid alignment instead of similarity")
    p_eval.add_argument("--time-offset", type=float, default=0.0,
                        help="seconds added to ground-truth timestamps before association")
    p_eval.add_argument("--rpe-deltas", default="", help="comma-separated path lengths in meters")
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (json.JSONDecodeError, TypeError, ValueError, InvalidModelError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DegenerateMotionError, NumericalFailureError, TrackingLostError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
