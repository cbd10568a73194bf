"""Alternating optimisation of the GPSSM and inducing-input selection."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateLikelihoodError, InvalidArgumentsError, NoDataError
from ..kernel import PDR_ADDITIVE, SeArdHyper
from .model import GpssmModel, NaturalParams
from .smoother import particle_smoother
from .variational import (elbo_hyper_gradient_batch, elbo_terms_batch,
                          update_natural_params_batch)

MIN_LOG_PROCESS_NOISE = np.log(1e-4)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 100
    rho: float = 0.5
    learning_rate: float = 1e-2
    batch_size: int = 1
    n_particles: int = 500
    n_backward: int = 50
    n_inducing: int = 50
    candidate_count: int = 1
    optimize_inducing: bool = False
    max_retries: int = 5
    signal_variance: float = 1.0
    lengthscales: tuple = None   # default: spread of the inducing inputs
    process_noise: float = 1.0
    initial_var: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or not 0 < self.rho <= 1:
            raise InvalidArgumentsError("invalid training configuration")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if d["lengthscales"] is not None:
            d["lengthscales"] = list(d["lengthscales"])
        return d


@dataclass
class TrainResult:
    model: GpssmModel
    surrogate_trace: list = field(default_factory=list)
    retries: int = 0


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.k = 0

    def step(self, grad):
        """Ascent step for the given gradient."""
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.k)
        vhat = self.v / (1 - self.b2 ** self.k)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _check_trajectories(trajectories):
    trajectories = [(np.atleast_2d(np.asarray(y, dtype=float)),
                     np.atleast_2d(np.asarray(u, dtype=float))) for y, u in trajectories]
    if not trajectories:
        raise NoDataError("need at least one trajectory")
    return trajectories


def _augmented(cloud, u):
    """Weighted-mean smoothed states ``x_{0:T-1}`` next to controls ``u_{1:T}``."""
    return np.hstack([cloud.mean()[:-1], u])


def farthest_point_subset(points, m, scale=None, start=0):
    """Indices of ``m`` points picked greedily by farthest distance, in original order."""
    P = np.asarray(points, dtype=float)
    if scale is not None:
        P = P / scale
    n = len(P)
    m = min(m, n)
    chosen = [start]
    dist = np.sum((P - P[start]) ** 2, axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((P - P[nxt]) ** 2, axis=1))
    return np.sort(np.array(chosen))


def initial_model(measurement, inducing_inputs, config=TrainConfig(), state_dim=2,
                  initial_mean=None):
    """GPSSM with ``q(f(Z))`` at its prior and hyperparameters from ``config``."""
    Z = np.atleast_2d(np.asarray(inducing_inputs, dtype=float))
    if config.lengthscales is not None:
        ls = np.asarray(config.lengthscales, dtype=float)
    else:
        ls = np.maximum(Z.std(axis=0), 0.5) if len(Z) > 1 else np.ones(Z.shape[1])
    hypers = tuple(SeArdHyper(config.signal_variance, ls) for _ in range(state_dim))
    M = Z.shape[0]
    model = GpssmModel(hypers, np.full(state_dim, config.process_noise), Z,
                       np.zeros((state_dim, M)), np.stack([np.eye(M)] * state_dim),
                       measurement, config.initial_var, initial_mean, PDR_ADDITIVE)
    return model.with_prior_posterior()


def select_inducing(trajectories, meas_model, candidate_count=1, M=50, config=TrainConfig(),
                    seed=None, return_selection=False):
    """Greedy trajectory selection by surrogate ELBO, then farthest-point subsampling.

    Each candidate set is scored by fitting ``q(f(Z))`` on its trajectories
    and evaluating the surrogate on every trajectory's cloud.
    """
    trajectories = _check_trajectories(trajectories)
    N = len(trajectories)
    if not 1 <= candidate_count <= N:
        raise InvalidArgumentsError("candidate_count must be between 1 and the trajectory count")
    seed = config.seed if seed is None else seed
    y0, u0 = trajectories[0]
    Dx = u0.shape[1]
    # under the prior q(f(Z)) the smoother does not depend on Z
    probe = initial_model(meas_model, np.hstack([y0[:1, :Dx], u0[:1]]), config, Dx)
    clouds = [particle_smoother(probe, y, u, config.n_particles, config.n_backward,
                                seed=[seed, 7, i]) for i, (y, u) in enumerate(trajectories)]
    aug = [_augmented(c, u) for c, (_, u) in zip(clouds, trajectories)]
    scale = None if config.lengthscales is None else np.asarray(config.lengthscales)

    def inducing_for(sel):
        pts = np.vstack([aug[i] for i in sel])
        m = M
        if m > len(pts):
            warnings.warn(f"only {len(pts)} augmented states available; using M={len(pts)}")
            m = len(pts)
        sc = scale if scale is not None else np.maximum(pts.std(axis=0), 1e-6)
        return pts[farthest_point_subset(pts, m, sc)]

    def score(sel):
        Z = inducing_for(sel)
        model = initial_model(meas_model, Z, config, Dx)
        nat = update_natural_params_batch([(clouds[i], trajectories[i][1]) for i in sel], model)
        model = model.with_posterior(*nat.to_moments())
        batch = [(clouds[i], trajectories[i][1], trajectories[i][0]) for i in range(N)]
        return elbo_terms_batch(batch, model).total

    selected = []
    for _ in range(candidate_count):
        best, best_val = None, -np.inf
        for c in range(N):
            if c in selected:
                continue
            val = score(selected + [c])
            if best is None or val > best_val:
                best, best_val = c, val
        selected.append(best)
    Z = inducing_for(selected)
    return (Z, selected) if return_selection else Z


def fit_gpssm(trajectories, meas_model, config=TrainConfig(), inducing_inputs=None,
              initial=None, callback=None):
    """Alternate smoothing, damped natural updates and Adam steps on log hyperparameters."""
    trajectories = _check_trajectories(trajectories)
    N = len(trajectories)
    Dx = trajectories[0][1].shape[1]
    if initial is not None:
        model = initial
    else:
        if inducing_inputs is None:
            inducing_inputs = select_inducing(trajectories, meas_model, config.candidate_count,
                                              config.n_inducing, config)
        model = initial_model(meas_model, inducing_inputs, config, Dx)
    rng = np.random.default_rng([config.seed, 11])
    adam = _Adam(config.learning_rate)
    wrt_z = config.optimize_inducing
    Dz = model.inducing_inputs.size if wrt_z else 0
    nq = slice(len(model.log_params()) - Dx, len(model.log_params()))
    last_step = np.zeros(len(model.log_params()) + Dz)
    trace = []
    retries = 0
    bs = min(config.batch_size, N)
    scale = N / bs
    for r in range(config.iterations):
        batch_idx = np.sort(rng.choice(N, size=bs, replace=False)) if bs < N else np.arange(N)
        for attempt in range(config.max_retries + 1):
            try:
                clouds = [particle_smoother(model, *trajectories[i], config.n_particles,
                                            config.n_backward, seed=[config.seed, r, attempt, i])
                          for i in batch_idx]
                break
            except DegenerateLikelihoodError:
                if attempt == config.max_retries:
                    raise
                retries += 1
                last_step = 0.5 * last_step
                theta = model.log_params(wrt_z) - last_step
                model = model.with_log_params(theta, wrt_z)
        pairs = [(c, trajectories[i][1]) for c, i in zip(clouds, batch_idx)]
        current = NaturalParams.from_moments(model.q_mean, model.q_cov)
        target = update_natural_params_batch(pairs, model, scale)
        model = model.with_posterior(*current.damped(target, config.rho).to_moments())
        batch = [(c, trajectories[i][1], trajectories[i][0]) for c, i in zip(clouds, batch_idx)]
        trace.append(elbo_terms_batch(batch, model, scale=scale).total)
        grad = elbo_hyper_gradient_batch(pairs, model, wrt_inducing=wrt_z, scale=scale).flat()
        theta = model.log_params(wrt_z)
        step = adam.step(grad)
        new = theta + step
        new[nq] = np.maximum(new[nq], MIN_LOG_PROCESS_NOISE)
        last_step = new - theta
        # q(f(Z)) keeps its moments; the prior under the new kernel changes around it
        model = model.with_log_params(new, wrt_z)
        if callback is not None:
            callback(r, model, trace[-1])
    return TrainResult(model, trace, retries)


def train(trajectories, meas_model, config=TrainConfig(), inducing_inputs=None):
    """Trained :class:`GpssmModel` for a list of ``(y, u)`` trajectories."""
    return fit_gpssm(trajectories, meas_model, config, inducing_inputs).model


def navigate(model, y, u, n_particles=500, n_backward=50, seed=0):
    """Smoothed mean ``(T+1, Dx)`` and covariance ``(T+1, Dx, Dx)`` under a frozen model."""
    cloud = particle_smoother(model, y, u, n_particles, n_backward, seed=seed)
    return cloud.mean(), cloud.cov()

