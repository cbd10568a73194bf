"""Command-line entry point.

Exit codes: 0 on success, 1 on usage errors (bad flags, missing files,
invalid configuration), 2 on data or numerical errors.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .errors import InvalidArgumentsError, NavigationError
from .gp_regression import GpMeasurementModel, MeasurementSurface, optimize_measurement_gp
from .gpssm import GpssmModel, TrainConfig, fit_gpssm, navigate
from .lgssm import LgssmParams, kalman_filter, rts_smoother
from .pathloss import DEFAULT_THRESHOLD, DeviceGeometry, RssScan, fit_all
from .pdr import process_imu
from .pipeline import (Loop, RunConfig, eval_mae, fit_lgssm, localize_scans, run_pipeline,
                       simulate)
from .simulator import Environment, calibration_samples

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration ---------------------------------------------------------------

def _coerce(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=(), seed=None):
    """RunConfig from an optional JSON file plus ``section.key=value`` overrides."""
    d = RunConfig().to_dict()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file {path} not found")
        user = json.loads(p.read_text())
        if "schema_version" not in user:
            raise UsageError("config lacks schema_version")
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override '{item}' is not key=value")
        key, val = item.split("=", 1)
        parts = key.split(".")
        node = d
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise UsageError(f"unknown config section '{part}'")
            node = node[part]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key '{key}'")
        node[parts[-1]] = _coerce(val)
    try:
        cfg = RunConfig.from_dict(d)
        if seed is not None:
            cfg = cfg.with_seed(seed)
    except (TypeError, InvalidArgumentsError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return cfg


def _need(path):
    if not Path(path).exists():
        raise UsageError(f"{path} not found")
    return path


# -- commands ----------------------------------------------------------------------

def cmd_simulate(args):
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = simulate(cfg.scenario)
    io.write_json(out / "environment.json", sc.env.to_dict())
    io.write_json(out / "config.json", cfg.to_dict())
    io.write_calibration(out / "calibration.csv",
                         calibration_samples(sc.calibration, sc.env.device_height),
                         sc.env.ap_positions)
    for k, (walk, scans) in enumerate(zip(sc.walks, sc.loop_scans), start=1):
        io.write_scans(out / f"loop{k}_scans.jsonl", scans)
        io.write_imu(out / f"loop{k}_imu.jsonl", walk.imu)
        io.write_estimate(out / f"loop{k}_truth.csv", walk.truth)
    print(f"wrote scenario with {len(sc.walks)} loops to {out}")


def _ap_positions(path):
    d = io.read_json(_need(path))
    if isinstance(d, dict) and "aps" in d:
        return Environment.from_dict(d).ap_positions
    if isinstance(d, list):
        return {a["ap_id"]: np.asarray(a["position"], dtype=float) for a in d}
    return {k: np.asarray(v, dtype=float) for k, v in d.items()}


def cmd_fit_pathloss(args):
    samples = io.read_calibration(_need(args.calib))
    aps = fit_all(samples, _ap_positions(args.ap_positions), args.d0)
    io.write_aps(args.out, aps)
    print(f"fitted {len(aps)} access points")


def _region(args):
    return tuple(args.region) if args.region else (0.0, 40.0, 0.0, 40.0)


def cmd_localize(args):
    aps = io.read_aps(_need(args.aps))
    scans = [s.filtered(args.threshold) for s in io.read_scans(_need(args.scans))]
    est = localize_scans(scans, aps, DeviceGeometry(args.height), _region(args))
    io.write_estimate(args.out, np.vstack([np.full((1, 2), np.nan), est]))
    print(f"localized {len(est)} scans")


def cmd_pdr(args):
    controls = process_imu(io.read_imu(_need(args.imu)), step_length=args.step_length)
    u = np.array([c.u for c in controls])
    io.write_estimate(args.out, np.vstack([np.full((1, 2), np.nan), u]))
    print(f"detected {len(controls)} steps")


def cmd_assemble(args):
    wifi, _ = io.read_estimate(_need(args.wifi))
    ctrl, _ = io.read_estimate(_need(args.controls))
    truth = io.read_estimate(_need(args.truth))[0] if args.truth else None
    io.write_trajectory(args.out, wifi[1:], ctrl[1:], truth)
    print(f"wrote trajectory with {len(wifi) - 1} steps")


def _calibration_scans(samples):
    groups = {}
    for ap_id, rows in samples.items():
        for pos, rss in rows:
            key = tuple(float(v) for v in pos)
            groups.setdefault(key, {})[ap_id] = rss
    keys = sorted(groups)
    return [RssScan(float(i), groups[k], k[:2]) for i, k in enumerate(keys)], keys


def cmd_train_meas(args):
    aps = io.read_aps(_need(args.aps))
    scans, keys = _calibration_scans(io.read_calibration(_need(args.calib)))
    height = keys[0][2] if keys else 1.2
    X = np.array([k[:2] for k in keys])
    Y = localize_scans(scans, aps, DeviceGeometry(height), _region(args))
    model = optimize_measurement_gp(X, Y, restarts=args.restarts, seed=args.seed,
                                    method=args.method)
    io.write_json(args.out, model.to_dict())
    print(f"trained measurement model on {len(X)} points")


def _trajectories(path):
    p = Path(_need(path))
    files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
    if not files:
        raise UsageError(f"no trajectory CSV files in {path}")
    return [io.read_trajectory(f) for f in files]


def cmd_train_gpssm(args):
    trajs = _trajectories(args.traj)
    if args.loops:
        trajs = trajs[:args.loops]
    meas = GpMeasurementModel.from_dict(io.read_json(_need(args.meas)))
    ys = np.vstack([y for y, _, _ in trajs])
    lo, hi = ys.min(axis=0), ys.max(axis=0)
    surface = MeasurementSurface.from_model(meas, (lo[0], hi[0], lo[1], hi[1]))
    cfg = replace(TrainConfig(), seed=args.seed)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    res = fit_gpssm([(y, u) for y, u, _ in trajs], surface, cfg)
    d = res.model.to_dict()
    d["config"] = cfg.to_dict()
    d["seed"] = args.seed
    io.write_json(args.out, d)
    print(f"trained GPSSM on {len(trajs)} trajectories")


def cmd_train_lgssm(args):
    y, u, _ = io.read_trajectory(_need(args.traj))
    res = fit_lgssm(Loop(y, u, np.zeros((len(y) + 1, 2))), args.iters)
    d = res.params.to_dict()
    d["loglik_trace"] = res.loglik_trace
    io.write_json(args.out, d)
    print(f"final log-likelihood {res.loglik_trace[-1]:.3f}")


def cmd_navigate(args):
    y, u, _ = io.read_trajectory(_need(args.traj))
    d = io.read_json(_need(args.model))
    if "transition_matrix" in d:
        params = LgssmParams.from_dict(d)
        params = replace(params, initial_mean=y[0])
        sm = rts_smoother(params, kalman_filter(params, y, u))
        mean, cov = sm.means, sm.covs
    else:
        if args.seed is None:
            raise UsageError("--seed is required for GPSSM navigation")
        model = GpssmModel.from_dict(d)
        mean, cov = navigate(model, y, u, args.particles, args.backward, args.seed)
    io.write_estimate(args.out, mean, cov)
    print(f"wrote {len(mean)} smoothed states")


def cmd_eval(args):
    est, _ = io.read_estimate(_need(args.estimate))
    _, _, truth = io.read_trajectory(_need(args.traj))
    if truth is None:
        raise UsageError("trajectory file carries no truth columns")
    mae = eval_mae(est[1:], truth[1:])
    if args.out:
        io.write_json(args.out, {"mae": mae})
    print(f"MAE {mae:.4f} m")


def write_report(report, cfg, out):
    from . import plotting
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "config.json", cfg.to_dict())
    io.write_json(out / "metrics.json", {"mae": report.mae, "seed": cfg.scenario.seed,
                                         "steps": len(report.truth) - 1})
    io.write_json(out / "timing.json", report.timing)
    io.write_json(out / "traces.json", report.traces)
    io.write_layers(out, report.estimates, report.truth, report.aps)
    plotting.plot_trajectories(out / "trajectories.png", report.estimates, report.truth,
                               report.aps, cfg.scenario.bounds)
    plotting.plot_mae(out / "mae.png", report.mae)
    plotting.plot_traces(out / "traces.png", report.traces)


def cmd_report(args):
    cfg = load_config(args.config, args.set, args.seed)
    report = run_pipeline(cfg)
    write_report(report, cfg, args.out)
    for name, v in report.mae.items():
        print(f"{name:12s} {v:.3f} m")


# -- parser ----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="gpssm-nav", description="WiFi/PDR fusion with a Gaussian process SSM")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(s):
        s.add_argument("--config", help="run configuration JSON")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration entry, e.g. scenario.n_loops=3")
        s.add_argument("--seed", type=int, required=True)
        s.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic office scenario")
    config_args(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit-pathloss", help="fit per-AP log-distance models")
    s.add_argument("--calib", required=True)
    s.add_argument("--ap-positions", required=True,
                   help="environment.json or a JSON map of AP positions")
    s.add_argument("--d0", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_pathloss)

    s = sub.add_parser("localize", help="WiFi-only position per scan")
    s.add_argument("--aps", required=True)
    s.add_argument("--scans", required=True)
    s.add_argument("--height", type=float, default=1.2)
    s.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    s.add_argument("--region", type=float, nargs=4, metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("pdr", help="step detection and control inputs from an IMU log")
    s.add_argument("--imu", required=True)
    s.add_argument("--step-length", type=float, default=0.7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pdr)

    s = sub.add_parser("assemble", help="merge WiFi estimates and controls into a trajectory")
    s.add_argument("--wifi", required=True)
    s.add_argument("--controls", required=True)
    s.add_argument("--truth")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_assemble)

    s = sub.add_parser("train-meas", help="fit the measurement GP on calibration data")
    s.add_argument("--calib", required=True)
    s.add_argument("--aps", required=True)
    s.add_argument("--region", type=float, nargs=4, metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    s.add_argument("--restarts", type=int, default=3)
    s.add_argument("--method", default="CG")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_meas)

    s = sub.add_parser("train-gpssm", help="learn the transition GP")
    s.add_argument("--traj", required=True, help="trajectory CSV or a directory of them")
    s.add_argument("--meas", required=True)
    s.add_argument("--loops", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_gpssm)

    s = sub.add_parser("train-lgssm", help="EM for the linear Gaussian baseline")
    s.add_argument("--traj", required=True)
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_lgssm)

    s = sub.add_parser("navigate", help="smooth a trajectory with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--particles", type=int, default=500)
    s.add_argument("--backward", type=int, default=50)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_navigate)

    s = sub.add_parser("eval", help="MAE of an estimate against trajectory truth")
    s.add_argument("--estimate", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="full comparison with figures and CSV layers")
    config_args(s)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NavigationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
