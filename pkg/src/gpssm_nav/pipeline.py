"""End-to-end comparison on a simulated office: WiFi, PDR, LGSSM and GPSSM.

Every stage is a plain function so the CLI can run them one at a time on
files, while :func:`run_pipeline` chains them in memory.
"""

import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import AlignmentError, InvalidArgumentsError, NavigationError, StageError
from .gp_regression import MeasurementSurface, optimize_measurement_gp
from .gpssm import TrainConfig, fit_gpssm, navigate
from .lgssm import LgssmParams, em_fit, kalman_filter, rts_smoother
from .pathloss import ApModel, fit_all, wifi_localize
from .pdr import controls_array, dead_reckon, process_imu
from .simulator import (WalkSpec, calibration_samples, gen_calibration, gen_environment,
                        gen_scans, gen_walk, u_path_waypoints)

SCHEMA_VERSION = 1
BASELINES = ("wifi-only", "pdr-only", "lgssm")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    n_aps: int = 26
    bounds: tuple = (0.0, 40.0, 0.0, 40.0)
    device_height: float = 1.2
    shadowing: bool = True
    shadow_amplitude: float = 4.0
    shadow_corr_length: float = 8.0
    threshold: float = -85.0
    steps: int = 147
    step_length: float = 0.7
    heading_bias_deg: float = 2.0
    heading_noise_deg: float = 3.0
    n_loops: int = 5
    n_calibration: int = 400


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    methods: tuple = ("wifi-only", "pdr-only", "lgssm", "gpssm")
    gpssm_loops: tuple = (1, 3, 5)
    meas_restarts: int = 3
    meas_method: str = "CG"
    surface_cell: float = 0.5
    lgssm_iters: int = 50
    lgssm_q: float = 0.1
    lgssm_r: float = 4.0
    train: TrainConfig = TrainConfig()
    nav_particles: int = 500
    nav_backward: int = 50
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        bad = set(self.methods) - set(BASELINES) - {"gpssm"}
        if bad:
            raise InvalidArgumentsError(f"unknown methods: {sorted(bad)}")
        if self.schema_version != SCHEMA_VERSION:
            raise InvalidArgumentsError(f"unsupported schema_version {self.schema_version}")
        if "gpssm" in self.methods and (not self.gpssm_loops
                                        or max(self.gpssm_loops) > self.scenario.n_loops
                                        or min(self.gpssm_loops) < 1):
            raise InvalidArgumentsError("gpssm loop counts must lie in 1..n_loops")

    def to_dict(self):
        d = asdict(self)
        d["scenario"]["bounds"] = list(self.scenario.bounds)
        d["methods"] = list(self.methods)
        d["gpssm_loops"] = list(self.gpssm_loops)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentsError(f"unknown config keys: {sorted(unknown)}")
        if "scenario" in d:
            sc = dict(d["scenario"])
            if "bounds" in sc:
                sc["bounds"] = tuple(sc["bounds"])
            d["scenario"] = ScenarioConfig(**sc)
        if "train" in d:
            tr = dict(d["train"])
            if tr.get("lengthscales") is not None:
                tr["lengthscales"] = tuple(tr["lengthscales"])
            d["train"] = TrainConfig(**tr)
        for k in ("methods", "gpssm_loops"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def with_seed(self, seed):
        return replace(self, scenario=replace(self.scenario, seed=seed),
                       train=replace(self.train, seed=seed))


@dataclass
class Loop:
    """One walk: measurements ``y`` (T, 2), controls ``u`` (T, 2), truth (T+1, 2)."""

    y: np.ndarray
    u: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        if len(self.y) != len(self.u) or len(self.truth) != len(self.y) + 1:
            raise AlignmentError("loop arrays are misaligned")


@dataclass
class Scenario:
    env: object
    walks: list
    loop_scans: list
    calibration: list


@dataclass
class Dataset:
    aps: dict
    calib_positions: np.ndarray
    calib_estimates: np.ndarray
    loops: list
    bounds: tuple


@dataclass
class Report:
    mae: dict
    estimates: dict
    truth: np.ndarray
    aps: dict
    timing: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)


def eval_mae(estimate, truth):
    """Mean Euclidean distance between aligned trajectories."""
    est = np.atleast_2d(np.asarray(estimate, dtype=float))
    tru = np.atleast_2d(np.asarray(truth, dtype=float))
    if est.shape != tru.shape:
        raise AlignmentError(f"estimate {est.shape} and truth {tru.shape} differ")
    if len(est) == 0:
        raise AlignmentError("empty trajectories")
    return float(np.mean(np.linalg.norm(est - tru, axis=1)))


def trajectory_mae(estimate, truth):
    """MAE over steps ``1..T`` of ``(T+1, 2)`` trajectories."""
    return eval_mae(np.asarray(estimate)[1:], np.asarray(truth)[1:])


# -- stages --------------------------------------------------------------------

def simulate(cfg):
    env = gen_environment(cfg.seed, cfg.n_aps, cfg.bounds, cfg.device_height, cfg.shadowing,
                          cfg.shadow_amplitude, cfg.shadow_corr_length,
                          threshold=cfg.threshold)
    spec = WalkSpec(u_path_waypoints(cfg.bounds, cfg.steps, cfg.step_length), cfg.step_length,
                    np.deg2rad(cfg.heading_bias_deg), np.deg2rad(cfg.heading_noise_deg))
    walks, scans = [], []
    for k in range(cfg.n_loops):
        w = gen_walk(env, spec, seed=cfg.seed * 1000 + k)
        walks.append(w)
        scans.append(gen_scans(env, w.truth[1:], seed=cfg.seed * 1000 + k))
    calib = gen_calibration(env, cfg.n_calibration, seed=cfg.seed)
    return Scenario(env, walks, scans, calib)


def localize_scans(scans, aps, geom, bounds):
    """WiFi position estimates ``(n, 2)`` for a sequence of scans."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return np.array([wifi_localize(s, aps, geom, bounds)[0] for s in scans])


def prepare(scenario):
    """Fit path-loss models, localize every scan and extract PDR controls."""
    env = scenario.env
    samples = calibration_samples(scenario.calibration, env.device_height)
    aps = fit_all(samples, env.ap_positions)
    geom = env.geometry
    calib_pos = np.array([s.position for s in scenario.calibration])
    calib_est = localize_scans(scenario.calibration, aps, geom, env.bounds)
    loops = []
    for walk, scans in zip(scenario.walks, scenario.loop_scans):
        y = localize_scans(scans, aps, geom, env.bounds)
        u = controls_array(process_imu(walk.imu))
        if len(u) != len(y):
            raise AlignmentError(f"{len(u)} detected steps for {len(y)} scans")
        loops.append(Loop(y, u, walk.truth))
    return Dataset(aps, calib_pos, calib_est, loops, tuple(env.bounds))


def wifi_only(loop):
    return np.vstack([loop.y[:1], loop.y])


def pdr_only(loop):
    return dead_reckon(loop.y[0], loop.u)


def fit_lgssm(loop, iters=50, q=0.1, r=4.0, p0=4.0):
    init = LgssmParams.random_walk(2, q, r, loop.y[0], p0)
    return em_fit(loop.y, loop.u, init, iters)


def lgssm_smooth(params, loop):
    return rts_smoother(params, kalman_filter(params, loop.y, loop.u)).means


def fit_measurement(dataset, restarts=3, seed=0, method="CG"):
    return optimize_measurement_gp(dataset.calib_positions, dataset.calib_estimates,
                                   restarts=restarts, seed=seed, method=method)


def measurement_surface(meas, bounds, cell=0.5):
    return MeasurementSurface.from_model(meas, bounds, cell=cell)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except NavigationError as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg, scenario=None):
    """Run every selected method on loop 1 of the scenario and score it."""
    seed = cfg.scenario.seed
    timing = {}
    t0 = time.perf_counter()
    if scenario is None:
        scenario = _stage("simulate", simulate, cfg.scenario)
    data = _stage("prepare", prepare, scenario)
    timing["prepare"] = time.perf_counter() - t0
    target = data.loops[0]
    est, traces = {}, {}
    if "wifi-only" in cfg.methods:
        est["wifi-only"] = wifi_only(target)
    if "pdr-only" in cfg.methods:
        est["pdr-only"] = pdr_only(target)
    if "lgssm" in cfg.methods:
        t = time.perf_counter()
        res = _stage("lgssm", fit_lgssm, target, cfg.lgssm_iters, cfg.lgssm_q, cfg.lgssm_r)
        est["lgssm"] = _stage("lgssm", lgssm_smooth, res.params, target)
        traces["lgssm"] = res.loglik_trace
        timing["lgssm"] = time.perf_counter() - t
    if "gpssm" in cfg.methods:
        t = time.perf_counter()
        meas = _stage("train-meas", fit_measurement, data, cfg.meas_restarts, seed,
                      cfg.meas_method)
        surface = measurement_surface(meas, data.bounds, cfg.surface_cell)
        timing["train-meas"] = time.perf_counter() - t
        for k in sorted(cfg.gpssm_loops):
            t = time.perf_counter()
            trajs = [(lp.y, lp.u) for lp in data.loops[:k]]
            res = _stage("train-gpssm", fit_gpssm, trajs, surface, cfg.train)
            mean, _ = _stage("navigate", navigate, res.model, target.y, target.u,
                             cfg.nav_particles, cfg.nav_backward, seed)
            est[f"gpssm-{k}"] = mean
            traces[f"gpssm-{k}"] = res.surrogate_trace
            timing[f"gpssm-{k}"] = time.perf_counter() - t
    mae = {name: trajectory_mae(x, target.truth) for name, x in est.items()}
    timing["total"] = time.perf_counter() - t0
    return Report(mae, est, target.truth, data.aps, timing, traces)


__all__ = ["ScenarioConfig", "RunConfig", "Loop", "Scenario", "Dataset", "Report", "eval_mae",
           "trajectory_mae", "simulate", "prepare", "wifi_only", "pdr_only", "fit_lgssm",
           "lgssm_smooth", "fit_measurement", "measurement_surface", "run_pipeline", "ApModel"]
