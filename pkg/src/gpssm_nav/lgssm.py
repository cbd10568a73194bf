"""Linear Gaussian state-space baseline: Kalman filter, RTS smoother and EM.

The model is

    x_t = F x_{t-1} + G u_t + q_t,   q_t ~ N(0, Q)
    y_t = H x_t + r_t,               r_t ~ N(0, R)

for t = 1..T with x_0 ~ N(m0, P0).  Arrays are indexed from 0 so that index
0 of the filtered/smoothed outputs is the initial state.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ConditioningError, ConsistencyError, InputShapeError, InvalidArgumentsError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LgssmParams:
    transition_matrix: np.ndarray
    control_matrix: np.ndarray
    transition_noise: np.ndarray
    measurement_matrix: np.ndarray
    measurement_noise: np.ndarray
    initial_mean: np.ndarray
    initial_cov: np.ndarray

    def __post_init__(self):
        for f in ("transition_matrix", "control_matrix", "transition_noise",
                  "measurement_matrix", "measurement_noise", "initial_cov"):
            object.__setattr__(self, f, np.atleast_2d(np.asarray(getattr(self, f), dtype=float)))
        object.__setattr__(self, "initial_mean",
                           np.atleast_1d(np.asarray(self.initial_mean, dtype=float)))
        for f in ("transition_noise", "measurement_noise", "initial_cov"):
            m = getattr(self, f)
            if not np.allclose(m, m.T, atol=1e-10) or np.any(np.diag(m) <= 0):
                raise InvalidArgumentsError(f"{f} must be symmetric with positive diagonal")

    @classmethod
    def random_walk(cls, dim, q, r, m0, p0):
        """Position-only model ``x_t = x_{t-1} + u_t + q``, ``y_t = x_t + r``."""
        eye = np.eye(dim)
        return cls(eye, eye, q * eye if np.isscalar(q) else q, eye,
                   r * eye if np.isscalar(r) else r, m0, p0 * eye if np.isscalar(p0) else p0)

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k]) for k in cls.__dataclass_fields__})


@dataclass
class FilterResult:
    means: np.ndarray          # (T+1, D) filtered, index 0 = prior
    covs: np.ndarray
    pred_means: np.ndarray     # (T+1, D) one-step predictions, index 0 = prior
    pred_covs: np.ndarray
    loglik: float


@dataclass
class SmootherResult:
    means: np.ndarray          # (T+1, D)
    covs: np.ndarray
    cross_covs: np.ndarray     # (T+1, D, D); [t] = Cov(x_t, x_{t-1} | y), [0] unused


@dataclass
class EmResult:
    params: LgssmParams
    loglik_trace: list = field(default_factory=list)


def _sym(m):
    return 0.5 * (m + m.T)


def _controls(u, T, params):
    if u is None:
        return np.zeros((T, params.control_matrix.shape[1]))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[0] != T:
        raise InputShapeError("controls and measurements must have equal length")
    return u


def kalman_filter(params, y, u=None):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T, Dy = y.shape
    F, G, Q = params.transition_matrix, params.control_matrix, params.transition_noise
    H, R = params.measurement_matrix, params.measurement_noise
    if H.shape[0] != Dy:
        raise InputShapeError("measurement dimension mismatch")
    u = _controls(u, T, params)
    D = F.shape[0]
    means = np.empty((T + 1, D))
    covs = np.empty((T + 1, D, D))
    pm = np.empty_like(means)
    pc = np.empty_like(covs)
    means[0] = pm[0] = params.initial_mean
    covs[0] = pc[0] = params.initial_cov
    loglik = 0.0
    eye = np.eye(D)
    for t in range(1, T + 1):
        m = F @ means[t - 1] + G @ u[t - 1]
        P = _sym(F @ covs[t - 1] @ F.T + Q)
        pm[t], pc[t] = m, P
        S = _sym(H @ P @ H.T + R)
        try:
            cS = cho_factor(S, lower=True)
        except LinAlgError as exc:
            raise ConditioningError(f"singular innovation covariance at step {t}") from exc
        innov = y[t - 1] - H @ m
        K = cho_solve(cS, H @ P).T
        means[t] = m + K @ innov
        # Joseph form keeps the covariance symmetric positive definite
        IKH = eye - K @ H
        covs[t] = _sym(IKH @ P @ IKH.T + K @ R @ K.T)
        loglik += -0.5 * (innov @ cho_solve(cS, innov) + 2 * np.sum(np.log(np.diag(cS[0])))
                          + Dy * LOG_2PI)
    return FilterResult(means, covs, pm, pc, float(loglik))


def rts_smoother(params, filt):
    F = params.transition_matrix
    T = filt.means.shape[0] - 1
    means = filt.means.copy()
    covs = filt.covs.copy()
    cross = np.zeros_like(covs)
    for t in range(T - 1, -1, -1):
        P_pred = filt.pred_covs[t + 1]
        try:
            c = cho_factor(P_pred, lower=True)
        except LinAlgError as exc:
            raise ConditioningError(f"singular predicted covariance at step {t + 1}") from exc
        J = cho_solve(c, F @ filt.covs[t]).T
        means[t] = filt.means[t] + J @ (means[t + 1] - filt.pred_means[t + 1])
        covs[t] = _sym(filt.covs[t] + J @ (covs[t + 1] - P_pred) @ J.T)
        cross[t + 1] = covs[t + 1] @ J.T
    return SmootherResult(means, covs, cross)


def _m_step(params, y, u, sm, estimate):
    T = y.shape[0]
    F, G, H = params.transition_matrix, params.control_matrix, params.measurement_matrix
    m, P, C = sm.means, sm.covs, sm.cross_covs
    updates = {}
    if "Q" in estimate:
        acc = np.zeros_like(params.transition_noise)
        for t in range(1, T + 1):
            e = m[t] - F @ m[t - 1] - G @ u[t - 1]
            acc += (np.outer(e, e) + P[t] + F @ P[t - 1] @ F.T
                    - C[t] @ F.T - F @ C[t].T)
        updates["transition_noise"] = _sym(acc / T)
    if "R" in estimate:
        acc = np.zeros_like(params.measurement_noise)
        for t in range(1, T + 1):
            e = y[t - 1] - H @ m[t]
            acc += np.outer(e, e) + H @ P[t] @ H.T
        updates["measurement_noise"] = _sym(acc / T)
    if "initial" in estimate:
        updates["initial_mean"] = m[0].copy()
        updates["initial_cov"] = _sym(P[0])
    return replace(params, **updates)


def em_step(params, y, u=None, estimate=("Q", "R")):
    """One EM iteration; returns ``(new_params, loglik_under_old_params)``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    u = _controls(u, y.shape[0], params)
    filt = kalman_filter(params, y, u)
    sm = rts_smoother(params, filt)
    return _m_step(params, y, u, sm, set(estimate)), filt.loglik


def em_fit(y, u, init, iters=50, estimate=("Q", "R"), tol=1e-8, check=True):
    """Closed-form EM over the noise covariances (and optionally the initial state)."""
    if iters < 1:
        raise InvalidArgumentsError("iters must be >= 1")
    params = init
    trace = []
    for _ in range(iters):
        new, ll = em_step(params, y, u, estimate)
        if check and trace and ll < trace[-1] - tol:
            raise ConsistencyError(f"EM log-likelihood decreased: {trace[-1]} -> {ll}")
        trace.append(ll)
        params = new
    final = kalman_filter(params, y, u).loglik
    if check and final < trace[-1] - tol:
        raise ConsistencyError(f"EM log-likelihood decreased: {trace[-1]} -> {final}")
    trace.append(final)
    return EmResult(params, trace)
