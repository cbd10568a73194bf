"""Containers for the variational GPSSM: model, particle cloud, natural parameters."""

from collections import namedtuple
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve

from ..errors import ConditioningError, InputShapeError, InvalidArgumentsError
from ..gp_regression import GpMeasurementModel, MeasurementSurface, _diag_gauss_logpdf
from ..kernel import PDR_ADDITIVE, MeanSpec, SeArdHyper, jittered_cholesky, kernel_matrix

Gaussian = namedtuple("Gaussian", ["mean", "cov"])


@dataclass(frozen=True)
class LinearGaussianMeasurement:
    """``y = H x + r`` with ``r ~ N(0, diag(noise_var))``; stands in for the GP."""

    H: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", np.atleast_2d(np.asarray(self.H, dtype=float)))
        object.__setattr__(self, "noise_var", np.atleast_1d(np.asarray(self.noise_var, dtype=float)))

    def predict(self, X):
        X = np.atleast_2d(X)
        mean = X @ self.H.T
        return mean, np.broadcast_to(self.noise_var, mean.shape)

    def log_likelihood(self, X, y):
        mean, var = self.predict(X)
        return _diag_gauss_logpdf(np.asarray(y, dtype=float), mean, var)

    def to_dict(self):
        return {"kind": "linear-gaussian", "H": self.H.tolist(), "noise_var": self.noise_var.tolist()}


def measurement_to_dict(meas):
    if isinstance(meas, MeasurementSurface):
        xs, ys = meas.xs, meas.ys
        return {"kind": "surface", "model": meas.model.to_dict(),
                "grid": [float(xs[0]), float(xs[-1]), float(ys[0]), float(ys[-1]),
                         float(xs[1] - xs[0])]}
    return meas.to_dict()


def measurement_from_dict(d):
    kind = d.get("kind")
    if kind == "linear-gaussian":
        return LinearGaussianMeasurement(np.asarray(d["H"]), np.asarray(d["noise_var"]))
    if kind == "surface":
        x0, x1, y0, y1, cell = d["grid"]
        return MeasurementSurface.from_model(GpMeasurementModel.from_dict(d["model"]),
                                             (x0, x1, y0, y1), cell=cell, margin=0.0)
    return GpMeasurementModel.from_dict(d)


@dataclass(frozen=True)
class GpssmModel:
    """Sparse variational GPSSM with one independent transition GP per state dimension.

    The inducing posterior is stored per output: ``q_mean[d]`` (M,) and
    ``q_cov[d]`` (M, M) describe ``q(f_d(Z))``.  ``initial_mean=None``
    anchors ``p(x0)`` at the first measurement of each trajectory.
    """

    hypers: tuple
    process_noise: np.ndarray
    inducing_inputs: np.ndarray
    q_mean: np.ndarray
    q_cov: np.ndarray
    measurement: object = field(repr=False)
    initial_var: float = 4.0
    initial_mean: np.ndarray = None
    mean: MeanSpec = PDR_ADDITIVE

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.inducing_inputs, dtype=float))
        q = np.atleast_1d(np.asarray(self.process_noise, dtype=float))
        object.__setattr__(self, "inducing_inputs", Z)
        object.__setattr__(self, "process_noise", q)
        object.__setattr__(self, "hypers", tuple(self.hypers))
        object.__setattr__(self, "q_mean", np.asarray(self.q_mean, dtype=float))
        object.__setattr__(self, "q_cov", np.asarray(self.q_cov, dtype=float))
        if self.initial_mean is not None:
            object.__setattr__(self, "initial_mean", np.asarray(self.initial_mean, dtype=float))
        Dx, M = len(self.hypers), Z.shape[0]
        if M < 1:
            raise InvalidArgumentsError("need at least one inducing input")
        if q.shape != (Dx,) or np.any(q <= 0):
            raise InvalidArgumentsError("process noise must be positive, one entry per state")
        if self.q_mean.shape != (Dx, M) or self.q_cov.shape != (Dx, M, M):
            raise InputShapeError("inducing posterior blocks must be (Dx, M) and (Dx, M, M)")
        for h in self.hypers:
            if h.input_dim != Z.shape[1]:
                raise InputShapeError("lengthscales must cover the augmented input")

    @property
    def state_dim(self):
        return len(self.hypers)

    @property
    def n_inducing(self):
        return self.inducing_inputs.shape[0]

    @property
    def mu(self):
        """Inducing posterior mean, output-major ``(M * Dx,)``."""
        return self.q_mean.reshape(-1)

    @property
    def sigma(self):
        """Dense block-diagonal inducing posterior covariance."""
        Dx, M = self.q_mean.shape
        out = np.zeros((Dx * M, Dx * M))
        for d in range(Dx):
            out[d * M:(d + 1) * M, d * M:(d + 1) * M] = self.q_cov[d]
        return out

    def prior_mean(self, Xhat):
        """Transition mean function evaluated at augmented inputs ``(P, Dx + Du)``."""
        Xhat = np.atleast_2d(Xhat)
        Dx = self.state_dim
        if self.mean.kind == "pdr-additive":
            return Xhat[:, :Dx] + Xhat[:, Dx:2 * Dx]
        if self.mean.kind == "linear-identity":
            return Xhat[:, :Dx].copy()
        return np.zeros((Xhat.shape[0], Dx))

    @cached_property
    def zfactors(self):
        """Per output: (chol of K_ZZ + jitter, jitter, K_ZZ without jitter)."""
        out = []
        for h in self.hypers:
            K = kernel_matrix(self.inducing_inputs, self.inducing_inputs, h)
            L, jitter = jittered_cholesky(K, h.signal_variance)
            out.append((L, jitter, K))
        return out

    @cached_property
    def transition_cache(self):
        """Per output: ``K^-1 (mu - m_Z)`` and ``K^-1 - K^-1 Sigma K^-1``."""
        out = []
        M = self.n_inducing
        for d, (L, _, _) in enumerate(self.zfactors):
            Kinv = cho_solve((L, True), np.eye(M))
            beta = Kinv @ (self.q_mean[d] - self.inducing_prior_mean[d])
            W = Kinv - Kinv @ self.q_cov[d] @ Kinv
            out.append((beta, 0.5 * (W + W.T)))
        return out

    @cached_property
    def inducing_prior_mean(self):
        return self.prior_mean(self.inducing_inputs).T.copy()  # (Dx, M)

    def initial_state(self, y=None):
        if self.initial_mean is not None:
            m0 = self.initial_mean
        elif y is not None and len(y):
            m0 = np.asarray(y, dtype=float)[0, :self.state_dim]
        else:
            raise InvalidArgumentsError("no anchor for the initial state")
        return Gaussian(np.array(m0, dtype=float), self.initial_var * np.eye(self.state_dim))

    def prior_natural(self):
        """Natural parameters of the prior ``p(f(Z))``."""
        eta1 = np.empty_like(self.q_mean)
        eta2 = np.empty_like(self.q_cov)
        M = self.n_inducing
        for d, (L, _, _) in enumerate(self.zfactors):
            Kinv = cho_solve((L, True), np.eye(M))
            eta1[d] = Kinv @ self.inducing_prior_mean[d]
            eta2[d] = -0.5 * Kinv
        return NaturalParams(eta1, eta2)

    def with_posterior(self, q_mean, q_cov):
        return replace(self, q_mean=np.asarray(q_mean), q_cov=np.asarray(q_cov))

    def with_prior_posterior(self):
        """Copy with ``q(f(Z))`` reset to the GP prior."""
        cov = np.stack([L @ L.T for L, _, _ in self.zfactors])
        return self.with_posterior(self.inducing_prior_mean.copy(), cov)

    # -- log-space hyperparameters ------------------------------------------
    def log_params(self, include_inducing=False):
        parts = [h.log_params for h in self.hypers] + [np.log(self.process_noise)]
        if include_inducing:
            parts.append(self.inducing_inputs.ravel())
        return np.concatenate(parts)

    def with_log_params(self, theta, include_inducing=False):
        theta = np.asarray(theta, dtype=float)
        Din = self.inducing_inputs.shape[1]
        Dx = self.state_dim
        n = Din + 1
        hypers = tuple(SeArdHyper.from_log_params(theta[d * n:(d + 1) * n]) for d in range(Dx))
        q = np.exp(theta[Dx * n:Dx * n + Dx])
        Z = self.inducing_inputs
        if include_inducing:
            Z = theta[Dx * n + Dx:].reshape(Z.shape)
        return replace(self, hypers=hypers, process_noise=q, inducing_inputs=Z)

    def to_dict(self):
        return {
            "hypers": [h.to_dict() for h in self.hypers],
            "process_noise": self.process_noise.tolist(),
            "inducing_inputs": self.inducing_inputs.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "initial_var": self.initial_var,
            "initial_mean": None if self.initial_mean is None else self.initial_mean.tolist(),
            "mean": self.mean.kind,
            "measurement": measurement_to_dict(self.measurement),
        }

    @classmethod
    def from_dict(cls, d):
        hypers = tuple(SeArdHyper.from_dict(h) for h in d["hypers"])
        Z = np.asarray(d["inducing_inputs"], dtype=float)
        Dx, M = len(hypers), Z.shape[0]
        mu = np.asarray(d["mu"]).reshape(Dx, M)
        sig = np.asarray(d["sigma"])
        cov = np.stack([sig[i * M:(i + 1) * M, i * M:(i + 1) * M] for i in range(Dx)])
        init = d.get("initial_mean")
        return cls(hypers, np.asarray(d["process_noise"]), Z, mu, cov,
                   measurement_from_dict(d["measurement"]), d["initial_var"],
                   None if init is None else np.asarray(init), MeanSpec(d.get("mean", "pdr-additive")))


@dataclass(frozen=True)
class ParticleCloud:
    trajectories: np.ndarray  # (S, T+1, Dx)
    log_weights: np.ndarray   # (S,), normalised

    def __post_init__(self):
        tr = np.asarray(self.trajectories, dtype=float)
        lw = np.asarray(self.log_weights, dtype=float)
        if tr.ndim != 3 or lw.shape != (tr.shape[0],):
            raise InputShapeError("trajectories must be (S, T+1, Dx) with one weight each")
        lw = lw - np.logaddexp.reduce(lw)
        object.__setattr__(self, "trajectories", tr)
        object.__setattr__(self, "log_weights", lw)

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def n_steps(self):
        return self.trajectories.shape[1] - 1

    def mean(self):
        return np.einsum("s,std->td", self.weights, self.trajectories)

    def cov(self):
        m = self.mean()
        dev = self.trajectories - m[None]
        return np.einsum("s,sti,stj->tij", self.weights, dev, dev)


@dataclass(frozen=True)
class NaturalParams:
    eta1: np.ndarray  # (Dx, M)
    eta2: np.ndarray  # (Dx, M, M)

    @classmethod
    def from_moments(cls, mean, cov):
        eta1 = np.empty_like(mean)
        eta2 = np.empty_like(cov)
        for d in range(mean.shape[0]):
            L, _ = jittered_cholesky(cov[d], max(np.trace(cov[d]) / cov.shape[1], 1e-300))
            P = cho_solve((L, True), np.eye(cov.shape[1]))
            eta2[d] = -0.5 * P
            eta1[d] = P @ mean[d]
        return cls(eta1, eta2)

    def to_moments(self):
        """``(mean, cov)`` with ``cov = (-2 eta2)^-1`` and ``mean = cov @ eta1``."""
        mean = np.empty_like(self.eta1)
        cov = np.empty_like(self.eta2)
        M = self.eta1.shape[1]
        for d in range(self.eta1.shape[0]):
            prec = -2.0 * self.eta2[d]
            prec = 0.5 * (prec + prec.T)
            try:
                L = np.linalg.cholesky(prec)
            except np.linalg.LinAlgError as exc:
                raise ConditioningError("-2 * eta2 is not positive definite") from exc
            cov[d] = cho_solve((L, True), np.eye(M))
            cov[d] = 0.5 * (cov[d] + cov[d].T)
            mean[d] = cho_solve((L, True), self.eta1[d])
        return mean, cov

    def damped(self, target, rho):
        """Convex combination ``(1 - rho) * self + rho * target``."""
        return NaturalParams((1 - rho) * self.eta1 + rho * target.eta1,
                             (1 - rho) * self.eta2 + rho * target.eta2)

    @property
    def dense_eta1(self):
        return self.eta1.reshape(-1)

    @property
    def dense_eta2(self):
        Dx, M = self.eta1.shape
        out = np.zeros((Dx * M, Dx * M))
        for d in range(Dx):
            out[d * M:(d + 1) * M, d * M:(d + 1) * M] = self.eta2[d]
        return out
