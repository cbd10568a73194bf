"""Readers and writers for the on-disk formats.

* trajectory CSV: ``step, y_x, y_y, u_x, u_y, truth_x, truth_y`` with row 0
  holding the initial state (empty measurement and control cells)
* estimate CSV: ``step, x, y`` per method
* calibration CSV: ``ap_id, x, y, z, rss``
* scans JSONL: ``{"t": ..., "readings": {ap_id: rss}, "x": ..., "y": ...}``
* IMU JSONL: ``{"t", "az"}`` accelerometer rows and ``{"t", "qw", "qx", "qy", "qz"}``
  rotation rows, in any interleaving
* models and configs: JSON
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import AlignmentError, InputShapeError, NoDataError
from .pathloss import ApModel, RssScan
from .pdr import ImuLog

TRAJ_COLUMNS = ["step", "y_x", "y_y", "u_x", "u_y", "truth_x", "truth_y"]


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def _num(s):
    return float("nan") if s == "" else float(s)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_trajectory(path, y, u, truth=None):
    """Write ``y`` (T, 2), ``u`` (T, 2) and optional ``truth`` (T+1, 2)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    T = len(y)
    if len(u) != T or (truth is not None and len(truth) != T + 1):
        raise AlignmentError("trajectory arrays are misaligned")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJ_COLUMNS)
        for t in range(T + 1):
            row = [t]
            row += [None, None, None, None] if t == 0 else [*y[t - 1], *u[t - 1]]
            row += [None, None] if truth is None else list(truth[t])
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])


def read_trajectory(path):
    """Return ``(y, u, truth)``; ``truth`` is None when the columns are empty."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise NoDataError(f"{path} has no rows")
    missing = set(TRAJ_COLUMNS) - set(rows[0])
    if missing:
        raise InputShapeError(f"{path} lacks columns {sorted(missing)}")
    steps = [int(r["step"]) for r in rows]
    if steps != list(range(len(rows))):
        raise AlignmentError("steps must run 0..T in order")
    y = np.array([[_num(r["y_x"]), _num(r["y_y"])] for r in rows[1:]]).reshape(-1, 2)
    u = np.array([[_num(r["u_x"]), _num(r["u_y"])] for r in rows[1:]]).reshape(-1, 2)
    truth = np.array([[_num(r["truth_x"]), _num(r["truth_y"])] for r in rows])
    if np.any(np.isnan(y)) or np.any(np.isnan(u)):
        raise InputShapeError("measurement or control cells missing after step 0")
    return y, u, (None if np.all(np.isnan(truth)) else truth)


def write_estimate(path, est, cov=None):
    est = np.atleast_2d(np.asarray(est, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["step", "x", "y"] + ([] if cov is None else ["var_x", "cov_xy", "var_y"])
        w.writerow(head)
        for t, p in enumerate(est):
            row = [t, _fmt(p[0]), _fmt(p[1])]
            if cov is not None:
                row += [_fmt(cov[t][0, 0]), _fmt(cov[t][0, 1]), _fmt(cov[t][1, 1])]
            w.writerow(row)


def read_estimate(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    est = np.array([[_num(r["x"]), _num(r["y"])] for r in rows]).reshape(-1, 2)
    if rows and "var_x" in rows[0]:
        cov = np.array([[[_num(r["var_x"]), _num(r["cov_xy"])],
                         [_num(r["cov_xy"]), _num(r["var_y"])]] for r in rows])
        return est, cov
    return est, None


def write_estimates_table(path, estimates, truth):
    """All methods side by side: ``step, truth_x, truth_y, <m>_x, <m>_y, ...``."""
    names = list(estimates)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "truth_x", "truth_y"] + [f"{n}_{c}" for n in names for c in "xy"])
        for t in range(len(truth)):
            row = [t, _fmt(truth[t][0]), _fmt(truth[t][1])]
            for n in names:
                row += [_fmt(estimates[n][t][0]), _fmt(estimates[n][t][1])]
            w.writerow(row)


def read_estimates_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader)
        rows = [[float(v) for v in r[1:]] for r in reader]
    data = np.array(rows)
    truth = data[:, :2]
    est = {}
    for j in range(3, len(head), 2):
        est[head[j][:-2]] = data[:, j - 1:j + 1]
    return est, truth


def write_calibration(path, samples, ap_positions):
    """``samples`` maps ap_id to ``[(position3, rss), ...]``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ap_id", "x", "y", "z", "rss"])
        for ap_id in sorted(samples):
            for pos, rss in samples[ap_id]:
                w.writerow([ap_id, _fmt(pos[0]), _fmt(pos[1]), _fmt(pos[2]), _fmt(rss)])


def read_calibration(path):
    samples = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            pos = np.array([float(r["x"]), float(r["y"]), float(r["z"])])
            samples.setdefault(r["ap_id"], []).append((pos, float(r["rss"])))
    if not samples:
        raise NoDataError(f"{path} has no calibration rows")
    return samples


def write_scans(path, scans):
    with open(path, "w") as fh:
        for s in scans:
            rec = {"t": s.timestamp, "readings": dict(sorted(s.readings.items()))}
            if s.position is not None:
                rec["x"], rec["y"] = float(s.position[0]), float(s.position[1])
            fh.write(json.dumps(rec) + "\n")


def read_scans(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            pos = (rec["x"], rec["y"]) if "x" in rec else None
            out.append(RssScan(float(rec["t"]), {k: float(v) for k, v in rec["readings"].items()},
                               pos))
    return out


def write_imu(path, log):
    rows = [(float(t), 0, {"t": float(t), "az": float(a)})
            for t, a in zip(log.accel_t, log.accel_z)]
    rows += [(float(t), 1, {"t": float(t), "qw": float(q[0]), "qx": float(q[1]),
                            "qy": float(q[2]), "qz": float(q[3])})
             for t, q in zip(log.rot_t, log.rot_q)]
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        for _, _, rec in rows:
            fh.write(json.dumps(rec) + "\n")


def read_imu(path):
    at, az, rt, rq = [], [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "az" in rec:
                at.append(rec["t"])
                az.append(rec["az"])
            if "qw" in rec:
                rt.append(rec["t"])
                rq.append([rec["qw"], rec["qx"], rec["qy"], rec["qz"]])
    if not at:
        raise NoDataError(f"{path} has no accelerometer rows")
    return ImuLog(np.array(at), np.array(az), np.array(rt), np.array(rq).reshape(-1, 4))


def write_aps(path, aps):
    write_json(path, [aps[k].to_dict() for k in sorted(aps)])


def read_aps(path):
    return {d["ap_id"]: ApModel.from_dict(d) for d in read_json(path)}


def write_layers(out_dir, estimates, truth, aps):
    """Plot-ready CSV layers: ``truth.csv``, ``estimates.csv`` and ``aps.csv``."""
    out_dir = Path(out_dir)
    write_estimate(out_dir / "truth.csv", truth)
    write_estimates_table(out_dir / "estimates.csv", estimates, truth)
    with open(out_dir / "aps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ap_id", "x", "y", "z"])
        for k in sorted(aps):
            p = aps[k].position
            w.writerow([k, _fmt(p[0]), _fmt(p[1]), _fmt(p[2])])
