"""Synthetic office: AP layout, U-shaped walks, RSS scans and IMU logs.

Everything is driven by explicit integer seeds.  Sub-streams are keyed as
``default_rng([seed, tag, ...])`` so that changing one generator never
perturbs another.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentsError, WaypointSpacingError
from .pathloss import DEFAULT_THRESHOLD, ApModel, DeviceGeometry, RssScan
from .pdr import ImuLog, yaw_quaternion

IMU_RATE = 100.0
A_RANGE = (-45.0, -35.0)
B_RANGE = (-3.5, -1.8)
SIGMA_RANGE = (2.0, 6.0)
AP_HEIGHT_RANGE = (0.0, 4.0)

_TAG_ENV, _TAG_SHADOW, _TAG_WALK, _TAG_SCAN, _TAG_CALIB, _TAG_IMU = range(6)


@dataclass(frozen=True)
class ShadowingField:
    """Per-AP smooth shadowing built from random Fourier features.

    The features approximate a zero-mean GP with squared-exponential
    correlation of the given length and standard deviation ``amplitude``.
    """

    omegas: np.ndarray   # (n_aps, F, 2)
    phases: np.ndarray   # (n_aps, F)
    amplitude: float
    corr_length: float

    @classmethod
    def sample(cls, n_aps, amplitude, corr_length, rng, n_features=96):
        return cls(rng.normal(0.0, 1.0 / corr_length, (n_aps, n_features, 2)),
                   rng.uniform(0.0, 2 * np.pi, (n_aps, n_features)), amplitude, corr_length)

    def __call__(self, X):
        """Shadowing in dB, shape ``(n_points, n_aps)``."""
        X = np.atleast_2d(X)
        F = self.omegas.shape[1]
        arg = np.einsum("pk,afk->paf", X, self.omegas) + self.phases[None]
        return self.amplitude * np.sqrt(2.0 / F) * np.cos(arg).sum(axis=2)


@dataclass(frozen=True)
class Environment:
    bounds: tuple
    aps: tuple
    device_height: float = 1.2
    seed: int = 0
    shadowing: ShadowingField = None
    threshold: float = DEFAULT_THRESHOLD

    @property
    def geometry(self):
        return DeviceGeometry(self.device_height)

    @property
    def ap_positions(self):
        return {ap.ap_id: ap.position for ap in self.aps}

    def mean_rss(self, X):
        """Noise-free RSS (dB) for each point and AP, shape ``(n, n_aps)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        P = np.array([ap.position for ap in self.aps])
        d = np.sqrt((X[:, None, 0] - P[None, :, 0]) ** 2 + (X[:, None, 1] - P[None, :, 1]) ** 2
                    + (self.device_height - P[None, :, 2]) ** 2)
        d = np.maximum(d, 0.01)
        A = np.array([ap.a for ap in self.aps])
        B = np.array([ap.b for ap in self.aps])
        d0 = np.array([ap.d0 for ap in self.aps])
        mu = A + 10.0 * B * np.log10(d / d0)
        if self.shadowing is not None:
            mu = mu + self.shadowing(X)
        return mu

    def to_dict(self):
        out = {"bounds": list(self.bounds), "device_height": self.device_height,
               "seed": self.seed, "threshold": self.threshold,
               "aps": [ap.to_dict() for ap in self.aps], "shadowing": None}
        if self.shadowing is not None:
            out["shadowing"] = {"omegas": self.shadowing.omegas.tolist(),
                                "phases": self.shadowing.phases.tolist(),
                                "amplitude": self.shadowing.amplitude,
                                "corr_length": self.shadowing.corr_length}
        return out

    @classmethod
    def from_dict(cls, d):
        sh = d.get("shadowing")
        if sh is not None:
            sh = ShadowingField(np.asarray(sh["omegas"]), np.asarray(sh["phases"]),
                                sh["amplitude"], sh["corr_length"])
        return cls(tuple(d["bounds"]), tuple(ApModel.from_dict(a) for a in d["aps"]),
                   d["device_height"], d["seed"], sh, d.get("threshold", DEFAULT_THRESHOLD))


def gen_environment(seed, n_aps=26, bounds=(0.0, 40.0, 0.0, 40.0), device_height=1.2,
                    shadowing=False, shadow_amplitude=4.0, shadow_corr_length=8.0,
                    sigma_range=SIGMA_RANGE, threshold=DEFAULT_THRESHOLD):
    if n_aps < 1:
        raise InvalidArgumentsError("need at least one access point")
    rng = np.random.default_rng([seed, _TAG_ENV])
    xmin, xmax, ymin, ymax = bounds
    aps = []
    for i in range(n_aps):
        pos = [rng.uniform(xmin, xmax), rng.uniform(ymin, ymax), rng.uniform(*AP_HEIGHT_RANGE)]
        a = rng.uniform(*A_RANGE)
        b = rng.uniform(*B_RANGE)
        s = rng.uniform(*sigma_range)
        aps.append(ApModel(f"ap{i:02d}", pos, a, b, s))
    field_ = None
    if shadowing:
        field_ = ShadowingField.sample(n_aps, shadow_amplitude, shadow_corr_length,
                                       np.random.default_rng([seed, _TAG_SHADOW]))
    return Environment(tuple(bounds), tuple(aps), device_height, seed, field_, threshold)


@dataclass(frozen=True)
class WalkSpec:
    waypoints: np.ndarray
    step_length: float = 0.7
    heading_bias: float = np.deg2rad(2.0)
    heading_noise_sd: float = np.deg2rad(3.0)
    step_count: int = None
    cadence: float = 0.5
    accel_amplitude: float = 2.5
    accel_noise_sd: float = 0.0

    def __post_init__(self):
        wp = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        object.__setattr__(self, "waypoints", wp)
        if wp.shape[0] < 2:
            raise InvalidArgumentsError("need at least two waypoints")
        if self.step_length <= 0:
            raise InvalidArgumentsError("step length must be positive")


@dataclass
class Walk:
    truth: np.ndarray          # (T+1, 2)
    true_controls: np.ndarray  # (T, 2)
    controls: np.ndarray       # (T, 2) as reported by the phone
    headings: np.ndarray       # (T,) reported headings
    step_times: np.ndarray     # (T,)
    imu: ImuLog = field(repr=False, default=None)

    @property
    def n_steps(self):
        return len(self.true_controls)


def u_path_waypoints(bounds=(0.0, 40.0, 0.0, 40.0), steps=147, step_length=0.7):
    """Waypoints of a U (down, across, up) that yields exactly ``steps`` steps."""
    side = int(round(steps * 0.354))
    across = steps - 2 * side
    if across < 1:
        raise InvalidArgumentsError("too few steps for a U path")
    h = (side + 0.5) * step_length
    w = (across + 0.5) * step_length
    xmin, xmax, ymin, ymax = bounds
    x0 = xmin + 0.5 * ((xmax - xmin) - w)
    ytop = ymin + 0.5 * ((ymax - ymin) + h)
    return np.array([[x0, ytop], [x0, ytop - h], [x0 + w, ytop - h], [x0 + w, ytop]])


def _walk_truth(spec):
    pos = spec.waypoints[0].copy()
    pts = [pos.copy()]
    headings = []
    L = spec.step_length
    for wp in spec.waypoints[1:]:
        d = wp - pos
        dist = np.hypot(*d)
        n = int(np.floor(dist / L + 1e-9))
        if n < 1:
            raise WaypointSpacingError(f"leg to {wp.tolist()} is shorter than one step")
        psi = np.arctan2(d[0], d[1])
        step = L * np.array([np.sin(psi), np.cos(psi)])
        for _ in range(n):
            pos = pos + step
            pts.append(pos.copy())
            headings.append(psi)
    return np.array(pts), np.array(headings)


def _imu_log(spec, headings, rng):
    T = len(headings)
    step_times = 1.0 + spec.cadence * np.arange(1, T + 1)
    n = int(round((step_times[-1] + 1.0) * IMU_RATE)) + 1
    t = np.arange(n) / IMU_RATE
    az = np.zeros(n)
    half = 0.15
    for ts in step_times:
        lo, hi = np.searchsorted(t, [ts - half, ts + half])
        tau = t[lo:hi] - ts
        az[lo:hi] += spec.accel_amplitude * 0.5 * (1 + np.cos(np.pi * tau / half))
    if spec.accel_noise_sd > 0:
        az = az + rng.normal(0.0, spec.accel_noise_sd, n)
    # heading held piecewise constant, switching midway between steps
    mids = 0.5 * (step_times[1:] + step_times[:-1])
    idx = np.searchsorted(mids, t)
    quats = np.array([yaw_quaternion(h) for h in headings])[idx]
    return ImuLog(t, az, t, quats), step_times


def gen_walk(env, spec, seed):
    """Ground truth, true and reported controls, and the exported IMU log."""
    xmin, xmax, ymin, ymax = env.bounds
    wp = spec.waypoints
    if np.any(wp[:, 0] < xmin) or np.any(wp[:, 0] > xmax) or np.any(wp[:, 1] < ymin) \
            or np.any(wp[:, 1] > ymax):
        raise InvalidArgumentsError("waypoints outside the environment")
    truth, psi_true = _walk_truth(spec)
    T = len(psi_true)
    rng = np.random.default_rng([seed, _TAG_WALK])
    k = np.arange(1, T + 1)
    psi = psi_true + spec.heading_bias * k
    if spec.heading_noise_sd > 0:
        psi = psi + rng.normal(0.0, spec.heading_noise_sd, T)
    L = spec.step_length
    controls = L * np.column_stack([np.sin(psi), np.cos(psi)])
    imu, step_times = _imu_log(spec, psi, np.random.default_rng([seed, _TAG_IMU]))
    return Walk(truth, np.diff(truth, axis=0), controls, psi, step_times, imu)


def _scan_positions(env, X, rng, scans_per_position, t0=0.0):
    mu = env.mean_rss(X)
    sig = np.array([ap.sigma for ap in env.aps])
    ids = [ap.ap_id for ap in env.aps]
    out = []
    for i, x in enumerate(np.atleast_2d(X)):
        for _ in range(scans_per_position):
            r = mu[i] + rng.normal(0.0, 1.0, len(ids)) * sig
            readings = {a: float(v) for a, v in zip(ids, r) if v >= env.threshold}
            out.append(RssScan(t0 + float(i), readings, (float(x[0]), float(x[1]))))
    return out


def gen_scans(env, positions, scans_per_position=1, seed=0):
    """One or more thresholded scans per position, in position order."""
    rng = np.random.default_rng([seed, _TAG_SCAN])
    return _scan_positions(env, positions, rng, scans_per_position)


def gen_calibration(env, n_points, seed=0, scans_per_point=1):
    """Uniformly placed calibration positions, each with its scans."""
    rng = np.random.default_rng([seed, _TAG_CALIB])
    xmin, xmax, ymin, ymax = env.bounds
    X = np.column_stack([rng.uniform(xmin, xmax, n_points), rng.uniform(ymin, ymax, n_points)])
    return _scan_positions(env, X, rng, scans_per_point)


def calibration_samples(scans, device_height):
    """Regroup calibration scans into per-AP ``(position3, rss)`` lists."""
    samples = {}
    for sc in scans:
        p = np.array([sc.position[0], sc.position[1], device_height])
        for ap_id, r in sc.readings.items():
            samples.setdefault(ap_id, []).append((p, r))
    return samples
