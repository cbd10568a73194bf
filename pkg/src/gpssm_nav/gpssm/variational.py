"""Sparse variational algebra for the transition GP.

Conventions: ``v_d = f_d(Z)`` has prior ``N(m_f(Z)_d, K_d)`` and the
conditional ``f_d(x) | v_d`` has mean ``m_f(x)_d + a_d(x) (v_d - m_f(Z)_d)``
with ``a_d(x) = k_d(x, Z) K_d^-1`` and variance
``b_d(x) = k_d(x, x) - a_d(x) k_d(Z, x)``.

Expectations over ``q(x_{t-1:t})`` are weighted averages over consecutive
state pairs of the smoothed trajectories in a :class:`ParticleCloud`.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..errors import ConditioningError, InputShapeError
from ..kernel import kernel_matrix
from .model import Gaussian, NaturalParams

LOG_2PI = np.log(2.0 * np.pi)


def gaussian_kl(q, p):
    """``KL(q || p)`` between two multivariate Gaussians given as (mean, cov)."""
    qm, qc = np.atleast_1d(q[0]).astype(float), np.atleast_2d(q[1]).astype(float)
    pm, pc = np.atleast_1d(p[0]).astype(float), np.atleast_2d(p[1]).astype(float)
    if qm.shape != pm.shape or qc.shape != pc.shape or qc.shape != (len(qm), len(qm)):
        raise InputShapeError("Gaussian dimensions differ")
    try:
        cp = cho_factor(pc, lower=True)
    except LinAlgError as exc:
        raise ConditioningError("reference covariance is singular") from exc
    sign, logdet_q = np.linalg.slogdet(qc)
    if sign <= 0:
        return np.inf
    diff = qm - pm
    n = len(qm)
    logdet_p = 2.0 * np.sum(np.log(np.diag(cp[0])))
    kl = 0.5 * (np.trace(cho_solve(cp, qc)) + diff @ cho_solve(cp, diff) - n
                + logdet_p - logdet_q)
    return max(float(kl), 0.0)


def _kl_block(model, d, mean, cov):
    L, _, _ = model.zfactors[d]
    M = L.shape[0]
    diff = mean - model.inducing_prior_mean[d]
    alpha = cho_solve((L, True), diff)
    tr = np.trace(cho_solve((L, True), cov))
    sign, logdet_q = np.linalg.slogdet(cov)
    if sign <= 0:
        return np.inf
    return 0.5 * (tr + diff @ alpha - M + 2.0 * np.sum(np.log(np.diag(L))) - logdet_q)


def inducing_kl(model, mean=None, cov=None):
    mean = model.q_mean if mean is None else mean
    cov = model.q_cov if cov is None else cov
    return float(sum(_kl_block(model, d, mean[d], cov[d]) for d in range(model.state_dim)))


def transition_factors(model, Xhat):
    """Batched ``a`` (Dx, P, M), ``b`` (Dx, P) and cross-covariances ``k(X, Z)``."""
    Xhat = np.atleast_2d(np.asarray(Xhat, dtype=float))
    Z = model.inducing_inputs
    if Xhat.shape[1] != Z.shape[1]:
        raise InputShapeError("augmented input dimension mismatch")
    Dx, P, M = model.state_dim, Xhat.shape[0], Z.shape[0]
    a = np.empty((Dx, P, M))
    b = np.empty((Dx, P))
    kxz = np.empty((Dx, P, M))
    for d, h in enumerate(model.hypers):
        L, _, _ = model.zfactors[d]
        kxz[d] = kernel_matrix(Xhat, Z, h)
        a[d] = cho_solve((L, True), kxz[d].T).T
        b[d] = h.signal_variance - np.sum(a[d] * kxz[d], axis=1)
    return a, np.maximum(b, 0.0), kxz


def predictive_factors(x_hat, model):
    """Dense ``A`` (Dx, M*Dx) and diagonal ``B`` (Dx, Dx) at one augmented input."""
    a, b, _ = transition_factors(model, np.atleast_2d(x_hat))
    Dx, _, M = a.shape
    A = np.zeros((Dx, Dx * M))
    for d in range(Dx):
        A[d, d * M:(d + 1) * M] = a[d, 0]
    return A, np.diag(b[:, 0])


def transition_moments(model, Xhat):
    """Auxiliary-model transition mean (P, Dx) and log trace factor (P,).

    The trace factor is ``-1/2 tr[Q^-1 (B + A Sigma A^T)]``.
    """
    Xhat = np.atleast_2d(np.asarray(Xhat, dtype=float))
    mean = model.prior_mean(Xhat)
    logc = np.zeros(Xhat.shape[0])
    Z = model.inducing_inputs
    # b + a Sigma a^T = k(x, x) - k(x, Z) (K^-1 - K^-1 Sigma K^-1) k(Z, x)
    for d, (h, (beta, W)) in enumerate(zip(model.hypers, model.transition_cache)):
        kxz = kernel_matrix(Xhat, Z, h)
        mean[:, d] += kxz @ beta
        var = h.signal_variance - np.sum((kxz @ W) * kxz, axis=1)
        logc -= 0.5 * np.maximum(var, 0.0) / model.process_noise[d]
    return mean, logc


@dataclass
class Pairs:
    """Flattened consecutive-state pairs ``(x_hat_{t-1}, x_t)`` with weights."""

    xhat: np.ndarray   # (P, Dx + Du)
    xnext: np.ndarray  # (P, Dx)
    w: np.ndarray      # (P,)

    @classmethod
    def from_cloud(cls, cloud, controls, scale=1.0):
        tr = cloud.trajectories
        S, T1, Dx = tr.shape
        T = T1 - 1
        u = np.asarray(controls, dtype=float).reshape(T, -1) if T else np.zeros((0, Dx))
        if T == 0:
            return cls(np.zeros((0, Dx + u.shape[1])), np.zeros((0, Dx)), np.zeros(0))
        xprev = tr[:, :-1, :]
        uu = np.broadcast_to(u[None], (S, T, u.shape[1]))
        xhat = np.concatenate([xprev, uu], axis=2).reshape(S * T, -1)
        w = np.repeat(cloud.weights, T) * scale
        return cls(xhat, tr[:, 1:, :].reshape(S * T, Dx), w)

    @classmethod
    def concat(cls, items):
        items = list(items)
        return cls(np.vstack([p.xhat for p in items]), np.vstack([p.xnext for p in items]),
                   np.concatenate([p.w for p in items]))


def _batch_pairs(batch, scale):
    return Pairs.concat(Pairs.from_cloud(c, u, scale) for c, u in batch)


def natural_params_from_pairs(model, pairs):
    prior = model.prior_natural()
    if len(pairs.w) == 0:
        return prior
    a, _, _ = transition_factors(model, pairs.xhat)
    base = model.prior_mean(pairs.xhat)
    eta1 = prior.eta1.copy()
    eta2 = prior.eta2.copy()
    for d in range(model.state_dim):
        q = model.process_noise[d]
        target = pairs.xnext[:, d] - base[:, d] + a[d] @ model.inducing_prior_mean[d]
        eta1[d] += a[d].T @ (pairs.w * target) / q
        eta2[d] -= 0.5 * (a[d].T * pairs.w) @ a[d] / q
    return NaturalParams(eta1, eta2)


def update_natural_params(cloud, controls, model, scale=1.0):
    """Optimal ``q(f(Z))`` natural parameters given the smoothed cloud."""
    return natural_params_from_pairs(model, Pairs.from_cloud(cloud, controls, scale))


def update_natural_params_batch(batch, model, scale=1.0):
    return natural_params_from_pairs(model, _batch_pairs(batch, scale))


@dataclass
class ElboTerms:
    neg_kl: float
    initial: float
    transition: float
    measurement: float

    @property
    def total(self):
        """Surrogate ELBO: every term except the entropy of ``q(x_{0:T})``."""
        return self.neg_kl + self.initial + self.transition + self.measurement


def _initial_term(model, cloud, y):
    g = model.initial_state(y)
    x0 = cloud.trajectories[:, 0, :]
    var = np.diag(g.cov)
    ll = -0.5 * np.sum((x0 - g.mean) ** 2 / var + np.log(var) + LOG_2PI, axis=1)
    return float(cloud.weights @ ll)


def _measurement_term(model, cloud, y):
    y = np.atleast_2d(y)
    S, T1, Dx = cloud.trajectories.shape
    if T1 == 1:
        return 0.0
    X = cloud.trajectories[:, 1:, :].reshape(-1, Dx)
    Y = np.broadcast_to(y[None], (S,) + y.shape).reshape(-1, y.shape[1])
    mean, var = model.measurement.predict(X)
    r = Y - mean
    ll = -0.5 * np.sum(r * r / var + np.log(var) + LOG_2PI, axis=1).reshape(S, T1 - 1)
    return float(cloud.weights @ ll.sum(axis=1))


def _transition_objective(model, pairs, grad=False, wrt_inducing=False):
    """Theta-dependent part of the surrogate: ``-KL + sum_p w_p T_p``.

    Returns ``(neg_kl, transition_term, gradient_or_None)`` where the gradient
    is over ``model.log_params(wrt_inducing)``.
    """
    Z = model.inducing_inputs
    M, Din = Z.shape
    Dx = model.state_dim
    w = pairs.w
    P = len(w)
    neg_kl = 0.0
    trans = 0.0
    if grad:
        g_hyp = np.zeros((Dx, Din + 1))
        g_q = np.zeros(Dx)
        g_z = np.zeros((M, Din))
    if P:
        base = model.prior_mean(pairs.xhat)
    eye = np.eye(M)
    for d, h in enumerate(model.hypers):
        L, jitter, Kzz = model.zfactors[d]
        q = model.process_noise[d]
        mu, Sig = model.q_mean[d], model.q_cov[d]
        delta = mu - model.inducing_prior_mean[d]
        Kinv = cho_solve((L, True), eye)
        beta = Kinv @ delta
        neg_kl -= _kl_block(model, d, mu, Sig)
        if P:
            kxz = kernel_matrix(pairs.xhat, Z, h)
            a = kxz @ Kinv
            b = np.maximum(h.signal_variance - np.sum(a * kxz, axis=1), 0.0)
            aS = a @ Sig
            v = np.sum(aS * a, axis=1)
            e = pairs.xnext[:, d] - base[:, d] - a @ delta
            trans += float(w @ (-0.5 * e * e / q - 0.5 * np.log(2 * np.pi * q) - 0.5 * (b + v) / q))
        if not grad:
            continue
        KSK = Kinv @ Sig @ Kinv
        GK = 0.5 * (KSK + np.outer(beta, beta) - Kinv)
        gmz = beta.copy()
        g_s_direct = 0.0
        if P:
            we = w * e
            Saa = (a.T * w) @ a
            GK += (-np.outer(a.T @ we, beta) - 0.5 * Saa + Kinv @ Sig @ Saa) / q
            Gx = (np.outer(we, beta) + (a - aS @ Kinv) * w[:, None]) / q
            gmz -= a.T @ we / q
            g_s_direct = -0.5 * np.sum(w) / q
            g_q[d] = float(w @ (0.5 * e * e / q - 0.5 + 0.5 * (b + v) / q))
        # chain rule through the kernel: K_ZZ (+ jitter proportional to s) and k(X, Z)
        ell2 = h.lengthscales ** 2
        GKK = GK * Kzz
        g_hyp[d, 0] = np.sum(GKK) + jitter * np.trace(GK) + h.signal_variance * g_s_direct
        dz = Z[:, None, :] - Z[None, :, :]
        g_hyp[d, 1:] = np.einsum("ij,ijk->k", GKK, dz * dz) / ell2
        g_z -= np.einsum("ij,ijk->ik", GKK + GKK.T, dz) / ell2
        if P:
            GxK = Gx * kxz
            g_hyp[d, 0] += np.sum(GxK)
            dx = pairs.xhat[:, None, :] - Z[None, :, :]
            g_hyp[d, 1:] += np.einsum("pm,pmk->k", GxK, dx * dx) / ell2
            g_z += np.einsum("pm,pmk->mk", GxK, dx) / ell2
        g_z[:, d] += gmz
        g_z[:, Dx + d] += gmz
    if not grad:
        return neg_kl, trans, None
    parts = [g_hyp.ravel(), g_q]
    if wrt_inducing:
        parts.append(g_z.ravel())
    return neg_kl, trans, np.concatenate(parts)


def elbo_terms(cloud, controls, model, natural=None, measurements=None):
    """Monte Carlo ELBO terms for one trajectory (entropy excluded)."""
    return elbo_terms_batch([(cloud, controls, measurements)], model, natural)


def elbo_terms_batch(batch, model, natural=None, scale=1.0):
    """Surrogate terms summed over ``(cloud, controls, measurements)`` items.

    The KL is counted once; every per-trajectory term is multiplied by ``scale``.
    """
    if natural is not None:
        model = model.with_posterior(*natural.to_moments())
    batch = list(batch)
    pairs = Pairs.concat(Pairs.from_cloud(c, u, scale) for c, u, _ in batch)
    neg_kl, trans, _ = _transition_objective(model, pairs)
    init = meas = 0.0
    for cloud, _, y in batch:
        init += scale * _initial_term(model, cloud, y)
        if y is not None:
            meas += scale * _measurement_term(model, cloud, y)
    return ElboTerms(neg_kl, init, trans, meas)


@dataclass
class HyperGradient:
    log_signal_variance: np.ndarray  # (Dx,)
    log_lengthscales: np.ndarray     # (Dx, Din)
    log_process_noise: np.ndarray    # (Dx,)
    inducing_inputs: np.ndarray      # (M, Din) or None

    def flat(self):
        parts = [np.column_stack([self.log_signal_variance, self.log_lengthscales]).ravel(),
                 self.log_process_noise]
        if self.inducing_inputs is not None:
            parts.append(self.inducing_inputs.ravel())
        return np.concatenate(parts)


def elbo_hyper_gradient(cloud, controls, model, natural=None, wrt_inducing=True, scale=1.0):
    """Gradient of the surrogate ELBO w.r.t. log kernel parameters, log Q and Z.

    ``q(f(Z))`` and the cloud are held fixed.
    """
    return elbo_hyper_gradient_batch([(cloud, controls)], model, natural, wrt_inducing, scale)


def elbo_hyper_gradient_batch(batch, model, natural=None, wrt_inducing=True, scale=1.0):
    if natural is not None:
        model = model.with_posterior(*natural.to_moments())
    pairs = _batch_pairs(batch, scale)
    _, _, g = _transition_objective(model, pairs, grad=True, wrt_inducing=wrt_inducing)
    Dx, (M, Din) = model.state_dim, model.inducing_inputs.shape
    hyp = g[:Dx * (Din + 1)].reshape(Dx, Din + 1)
    gq = g[Dx * (Din + 1):Dx * (Din + 1) + Dx]
    gz = g[Dx * (Din + 1) + Dx:].reshape(M, Din) if wrt_inducing else None
    return HyperGradient(hyp[:, 0].copy(), hyp[:, 1:].copy(), gq.copy(), gz)


def surrogate_objective(batch, model, scale=1.0, wrt_inducing=False, grad=False):
    """``(value, gradient)`` of the theta-dependent surrogate for optimisers."""
    pairs = _batch_pairs(batch, scale)
    neg_kl, trans, g = _transition_objective(model, pairs, grad=grad, wrt_inducing=wrt_inducing)
    return neg_kl + trans, g


__all__ = ["Gaussian", "gaussian_kl", "predictive_factors", "transition_factors",
           "transition_moments", "update_natural_params", "update_natural_params_batch",
           "elbo_terms", "elbo_terms_batch", "elbo_hyper_gradient",
           "elbo_hyper_gradient_batch", "ElboTerms", "HyperGradient", "Pairs",
           "surrogate_objective", "inducing_kl"]
