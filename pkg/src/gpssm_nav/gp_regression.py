"""Exact GP regression for the measurement function.

The measurement GP maps a true 2-D position to the coarse WiFi position
estimate observed there.  Each output dimension is an independent scalar GP
with its own SE-ARD hyperparameters and its own noise variance, so the joint
covariance ``K + I (x) R`` splits into one ``N x N`` system per output.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular
from scipy.optimize import minimize

from .errors import (ConditioningError, InputShapeError, InvalidArgumentsError,
                     OptimizationDivergedError)
from .kernel import (LINEAR_IDENTITY, MeanSpec, SeArdHyper, jittered_cholesky,
                     kernel_matrix)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GpMeasurementModel:
    train_inputs: np.ndarray
    train_targets: np.ndarray
    hypers: tuple
    noise_var: np.ndarray
    mean: MeanSpec = LINEAR_IDENTITY
    fit_info: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.train_inputs, dtype=float))
        Y = np.atleast_2d(np.asarray(self.train_targets, dtype=float))
        noise = np.atleast_1d(np.asarray(self.noise_var, dtype=float))
        object.__setattr__(self, "train_inputs", X)
        object.__setattr__(self, "train_targets", Y)
        object.__setattr__(self, "noise_var", noise)
        object.__setattr__(self, "hypers", tuple(self.hypers))
        if X.shape[0] < 1 or X.shape[0] != Y.shape[0]:
            raise InputShapeError("need N >= 1 paired inputs and targets")
        if len(self.hypers) != Y.shape[1] or noise.shape != (Y.shape[1],):
            raise InputShapeError("one hyperparameter set and noise variance per output")
        if np.any(noise <= 0):
            raise InvalidArgumentsError("noise variances must be positive")
        for h in self.hypers:
            if h.input_dim != X.shape[1]:
                raise InputShapeError("lengthscale count must match input dimension")

    @property
    def input_dim(self):
        return self.train_inputs.shape[1]

    @property
    def output_dim(self):
        return self.train_targets.shape[1]

    @property
    def noise_cov(self):
        return np.diag(self.noise_var)

    def prior_mean(self, X):
        X = np.atleast_2d(X)
        if self.mean.kind == "zero":
            return np.zeros((X.shape[0], self.output_dim))
        if self.output_dim != self.input_dim:
            raise InputShapeError("linear-identity mean needs equal input and output dims")
        return np.array(X, dtype=float)

    @cached_property
    def _factors(self):
        """Per output: (cholesky factor, alpha, jitter)."""
        X = self.train_inputs
        resid = self.train_targets - self.prior_mean(X)
        out = []
        for d, hyper in enumerate(self.hypers):
            K = kernel_matrix(X, X, hyper)
            K[np.diag_indices_from(K)] += self.noise_var[d]
            L, jitter = jittered_cholesky(K, hyper.signal_variance)
            alpha = cho_solve((L, True), resid[:, d])
            out.append((L, alpha, jitter))
        return out

    def predict(self, X):
        """Predictive mean and variance of ``y = g(x) + r`` at each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise InputShapeError("test input dimension mismatch")
        mean = self.prior_mean(X)
        var = np.empty_like(mean)
        for d, hyper in enumerate(self.hypers):
            L, alpha, _ = self._factors[d]
            Ks = kernel_matrix(X, self.train_inputs, hyper)
            mean[:, d] += Ks @ alpha
            V = solve_triangular(L, Ks.T, lower=True)
            var[:, d] = hyper.signal_variance - np.sum(V * V, axis=0) + self.noise_var[d]
        return mean, np.maximum(var, 1e-300)

    def log_likelihood(self, X, y):
        """``log p(y | x)`` for each particle row of ``X``."""
        mean, var = self.predict(X)
        return _diag_gauss_logpdf(np.asarray(y, dtype=float), mean, var)

    def to_dict(self):
        return {
            "kind": "gp-measurement",
            "mean": self.mean.kind,
            "train_inputs": self.train_inputs.tolist(),
            "train_targets": self.train_targets.tolist(),
            "hypers": [h.to_dict() for h in self.hypers],
            "noise_var": self.noise_var.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["train_inputs"]), np.asarray(d["train_targets"]),
                   tuple(SeArdHyper.from_dict(h) for h in d["hypers"]),
                   np.asarray(d["noise_var"]), MeanSpec(d.get("mean", "linear-identity")))


def _diag_gauss_logpdf(y, mean, var):
    r = y - mean
    return -0.5 * np.sum(r * r / var + np.log(var) + LOG_2PI, axis=-1)


def posterior_predict(model, x_star):
    """Predictive mean vector and (diagonal) covariance matrix at one input."""
    mean, var = model.predict(np.atleast_2d(x_star))
    return mean[0], np.diag(var[0])


# -- log-marginal likelihood ------------------------------------------------

def _pairwise_sq(X):
    return (X.T[:, :, None] - X.T[:, None, :]) ** 2


def _lml_1d(X, resid, hyper, noise, with_grad, sq=None):
    N = X.shape[0]
    if sq is None:
        sq = _pairwise_sq(X)
    ell2 = hyper.lengthscales ** 2
    K = hyper.signal_variance * np.exp(-0.5 * np.tensordot(1.0 / ell2, sq, axes=1))
    Ky = K.copy()
    Ky[np.diag_indices_from(Ky)] += noise
    L, jitter = jittered_cholesky(Ky, hyper.signal_variance)
    alpha = cho_solve((L, True), resid)
    lml = -0.5 * resid @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * N * LOG_2PI
    if not with_grad:
        return lml, None
    W, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise ConditioningError("inverse from Cholesky factor failed")
    W = np.tril(W) + np.tril(W, -1).T
    GK = (np.outer(alpha, alpha) - W) * K
    trG = alpha @ alpha - np.trace(W)
    grad = np.empty(hyper.input_dim + 2)
    # jitter is proportional to the signal variance, so it moves with log s
    grad[0] = 0.5 * (np.sum(GK) + jitter * trG)
    grad[1:-1] = 0.5 * np.tensordot(sq, GK, axes=([1, 2], [0, 1])) / ell2
    grad[-1] = 0.5 * noise * trG
    return lml, grad


def _residuals(model):
    return model.train_targets - model.prior_mean(model.train_inputs)


def log_marginal_likelihood(model):
    resid = _residuals(model)
    return float(sum(
        _lml_1d(model.train_inputs, resid[:, d], h, model.noise_var[d], False)[0]
        for d, h in enumerate(model.hypers)))


def lml_gradient(model):
    """Gradient w.r.t. ``[log s, log l_1..l_D, log R_dd]`` for each output, concatenated."""
    resid = _residuals(model)
    return np.concatenate([
        _lml_1d(model.train_inputs, resid[:, d], h, model.noise_var[d], True)[1]
        for d, h in enumerate(model.hypers)])


def log_params(model):
    return np.concatenate([np.append(h.log_params, np.log(model.noise_var[d]))
                           for d, h in enumerate(model.hypers)])


def with_log_params(model, theta):
    theta = np.asarray(theta, dtype=float)
    n = model.input_dim + 2
    hypers, noise = [], []
    for d in range(model.output_dim):
        block = theta[d * n:(d + 1) * n]
        hypers.append(SeArdHyper.from_log_params(block[:-1]))
        noise.append(np.exp(block[-1]))
    return GpMeasurementModel(model.train_inputs, model.train_targets, tuple(hypers),
                              np.array(noise), model.mean)


# -- training -----------------------------------------------------------------

def default_init(train_inputs, train_targets, mean=LINEAR_IDENTITY):
    """Lengthscales from input spread; signal and noise from the residual variance."""
    X = np.atleast_2d(train_inputs)
    tmp = GpMeasurementModel(X, train_targets,
                             tuple(SeArdHyper(1.0, np.ones(X.shape[1]))
                                   for _ in range(np.atleast_2d(train_targets).shape[1])),
                             np.ones(np.atleast_2d(train_targets).shape[1]), mean)
    resid = _residuals(tmp)
    ls = np.maximum(X.std(axis=0), 1e-3) if X.shape[0] > 1 else np.ones(X.shape[1])
    var = np.maximum(resid.var(axis=0), 1e-6)
    return tuple(SeArdHyper(v, ls) for v in var), 0.1 * var


def _optimize_output(X, resid, theta0, maxiter, gtol, method="CG"):
    """Maximise one output's LML over ``[log s, log l, log noise]``."""
    D = X.shape[1]
    sq = _pairwise_sq(X)
    trace = []
    seen = {}

    def unpack(theta):
        return SeArdHyper.from_log_params(theta[:D + 1]), float(np.exp(theta[-1]))

    def objective(theta):
        if not np.all(np.isfinite(theta)) or np.any(np.abs(theta) > 40):
            return np.inf, np.zeros_like(theta)
        try:
            hyper, noise = unpack(theta)
            lml, grad = _lml_1d(X, resid, hyper, noise, True, sq)
        except ConditioningError:
            return np.inf, np.zeros_like(theta)
        if not np.isfinite(lml):
            return np.inf, np.zeros_like(theta)
        seen[theta.tobytes()] = -lml
        return -lml, -grad

    f0, _ = objective(theta0)
    if not np.isfinite(f0):
        raise OptimizationDivergedError("objective not finite at initialization", theta0)
    trace.append(-f0)
    last = {"theta": np.array(theta0)}

    def callback(theta):
        f = seen.get(theta.tobytes())
        if f is None:
            f, _ = objective(theta)
        seen.clear()
        if np.isfinite(f):
            last["theta"] = np.array(theta)
            trace.append(-f)

    res = minimize(objective, theta0, jac=True, method=method, callback=callback,
                   options={"gtol": gtol, "maxiter": maxiter})
    theta = res.x if np.isfinite(res.fun) else last["theta"]
    f, _ = objective(theta)
    if not np.isfinite(f):
        raise OptimizationDivergedError("objective became non-finite", last["theta"])
    return theta, -f, trace


def optimize_measurement_gp(train_inputs, train_targets, init=None, mean=LINEAR_IDENTITY,
                            restarts=3, seed=0, maxiter=500, gtol=1e-5, method="CG"):
    """Fit hyperparameters and noise by maximising the log-marginal likelihood.

    ``init`` is an optional ``(hypers, noise_var)`` pair; otherwise
    :func:`default_init` is used.  The first start is the initialization
    itself, the remaining ``restarts - 1`` starts perturb it in log space.
    """
    X = np.atleast_2d(np.asarray(train_inputs, dtype=float))
    Y = np.atleast_2d(np.asarray(train_targets, dtype=float))
    if X.shape[0] < 2:
        raise InvalidArgumentsError("need at least two training pairs")
    hypers0, noise0 = init if init is not None else default_init(X, Y, mean)
    base = GpMeasurementModel(X, Y, hypers0, noise0, mean)
    resid = _residuals(base)
    rng = np.random.default_rng(seed)
    n = X.shape[1] + 2
    theta_all = log_params(base)
    traces = []
    for d in range(Y.shape[1]):
        start = theta_all[d * n:(d + 1) * n]
        best = None
        for r in range(max(restarts, 1)):
            theta0 = start if r == 0 else start + rng.normal(0.0, 1.0, n)
            try:
                theta, lml, trace = _optimize_output(X, resid[:, d], theta0, maxiter, gtol,
                                                     method)
            except OptimizationDivergedError:
                if r == 0:
                    raise
                continue
            if best is None or lml > best[1]:
                best = (theta, lml, trace)
        theta_all[d * n:(d + 1) * n] = best[0]
        traces.append(best[2])
    fitted = with_log_params(base, theta_all)
    object.__setattr__(fitted, "fit_info", {"lml_traces": traces})
    return fitted


# -- cached likelihood surface ------------------------------------------------

@dataclass(frozen=True)
class MeasurementSurface:
    """Bilinear interpolation of the GP predictive mean/variance on a 2-D grid.

    Particle filters evaluate ``p(y|x)`` for hundreds of particles per step;
    tabulating the closed-form predictive once turns that into a lookup.
    Points outside the grid fall back to the exact model.
    """

    model: GpMeasurementModel
    xs: np.ndarray
    ys: np.ndarray
    mean_grid: np.ndarray
    var_grid: np.ndarray

    @classmethod
    def from_model(cls, model, bounds, cell=0.5, margin=12.0, chunk=2048):
        if model.input_dim != 2:
            raise InputShapeError("surface tabulation needs 2-D inputs")
        xmin, xmax, ymin, ymax = bounds
        xs = np.arange(xmin - margin, xmax + margin + 0.5 * cell, cell)
        ys = np.arange(ymin - margin, ymax + margin + 0.5 * cell, cell)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        means, vars_ = [], []
        for i in range(0, len(pts), chunk):
            m, v = model.predict(pts[i:i + chunk])
            means.append(m)
            vars_.append(v)
        shape = (len(xs), len(ys), model.output_dim)
        return cls(model, xs, ys, np.vstack(means).reshape(shape), np.vstack(vars_).reshape(shape))

    @property
    def noise_var(self):
        return self.model.noise_var

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        xs, ys = self.xs, self.ys
        inside = ((X[:, 0] >= xs[0]) & (X[:, 0] <= xs[-1])
                  & (X[:, 1] >= ys[0]) & (X[:, 1] <= ys[-1]))
        mean = np.empty((X.shape[0], self.mean_grid.shape[2]))
        var = np.empty_like(mean)
        if np.any(inside):
            P = X[inside]
            fx = (P[:, 0] - xs[0]) / (xs[1] - xs[0])
            fy = (P[:, 1] - ys[0]) / (ys[1] - ys[0])
            i = np.clip(np.floor(fx).astype(int), 0, len(xs) - 2)
            j = np.clip(np.floor(fy).astype(int), 0, len(ys) - 2)
            tx = (fx - i)[:, None]
            ty = (fy - j)[:, None]
            for grid, out in ((self.mean_grid, mean), (self.var_grid, var)):
                out[inside] = ((1 - tx) * (1 - ty) * grid[i, j] + tx * (1 - ty) * grid[i + 1, j]
                               + (1 - tx) * ty * grid[i, j + 1] + tx * ty * grid[i + 1, j + 1])
        if not np.all(inside):
            m, v = self.model.predict(X[~inside])
            mean[~inside] = m
            var[~inside] = v
        return mean, var

    def log_likelihood(self, X, y):
        mean, var = self.predict(X)
        return _diag_gauss_logpdf(np.asarray(y, dtype=float), mean, var)
