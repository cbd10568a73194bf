"""Forward bootstrap filter plus backward simulation for the auxiliary SSM.

The auxiliary model has transition ``N(x_t | m_f(x_hat) + A (mu - m_f(Z)), Q)``
and an extra potential ``c(x_{t-1}) = exp(-1/2 tr[Q^-1 (B + A Sigma A^T)])``.
The potential is folded into the weights of the particles it conditions on,
before resampling, which leaves the smoothing target unchanged.
"""

import numpy as np

from ..errors import DegenerateLikelihoodError, InputShapeError, InvalidArgumentsError
from .model import ParticleCloud
from .variational import transition_moments

_BLOCK = 256


def systematic_resample(weights, rng):
    """Ancestor indices from one uniform draw on ``[0, 1/S)``."""
    w = np.asarray(weights, dtype=float)
    S = len(w)
    positions = (rng.random() + np.arange(S)) / S
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, positions, side="right"), S - 1)


def _normalize(lw, step):
    top = np.max(lw)
    if not np.isfinite(top):
        raise DegenerateLikelihoodError(step)
    lw = lw - top
    lw = np.where(np.isfinite(lw), lw, -np.inf)
    return lw - np.log(np.sum(np.exp(lw)))


def _backward_logits(xs, means, logw, q):
    """Unnormalised log-weights ``(B, S)`` of predecessors for each ``xs`` row."""
    out = np.broadcast_to(logw, (len(xs), len(logw))).copy()
    for d in range(xs.shape[1]):
        r = xs[:, d, None] - means[None, :, d]
        out -= (0.5 / q[d]) * (r * r)
    return out


def particle_smoother(model, y, u, n_particles=500, n_backward=50, seed=0, ess_threshold=0.5):
    """Sample ``n_backward`` joint trajectories from the smoothing distribution.

    ``y`` is ``(T, Dy)``, ``u`` is ``(T, Du)``; the returned cloud has
    uniform weights and trajectories of shape ``(n_backward, T + 1, Dx)``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    T = y.shape[0]
    if T < 1:
        raise InvalidArgumentsError("need at least one measurement")
    if u.shape[0] != T:
        raise InputShapeError("controls and measurements must have equal length")
    if n_particles < 2 or n_backward < 1:
        raise InvalidArgumentsError("need n_particles >= 2 and n_backward >= 1")
    S, Dx = n_particles, model.state_dim
    q = model.process_noise
    sd = np.sqrt(q)
    rng = np.random.default_rng(seed)

    X = np.empty((T + 1, S, Dx))
    logw = np.empty((T + 1, S))      # filter weights including the potential
    means = np.empty((T, S, Dx))     # transition means out of step t-1

    x0 = model.initial_state(y)
    X[0] = x0.mean + rng.standard_normal((S, Dx)) * np.sqrt(np.diag(x0.cov))
    lw = np.full(S, -np.log(S))
    for t in range(1, T + 1):
        xhat = np.hstack([X[t - 1], np.broadcast_to(u[t - 1], (S, u.shape[1]))])
        mean, logc = transition_moments(model, xhat)
        means[t - 1] = mean
        lw = _normalize(lw + logc, t)
        logw[t - 1] = lw
        w = np.exp(lw)
        if 1.0 / np.sum(w * w) < ess_threshold * S:
            anc = systematic_resample(w, rng)
            prev = np.full(S, -np.log(S))
        else:
            anc = np.arange(S)
            prev = lw
        X[t] = mean[anc] + rng.standard_normal((S, Dx)) * sd
        ll = model.measurement.log_likelihood(X[t], y[t - 1])
        lw = _normalize(prev + ll, t)
    logw[T] = lw

    # backward simulation
    out = np.empty((n_backward, T + 1, Dx))
    idx = rng.choice(S, size=n_backward, p=np.exp(logw[T]))
    out[:, T] = X[T, idx]
    for t in range(T, 0, -1):
        for lo in range(0, n_backward, _BLOCK):
            xs = out[lo:lo + _BLOCK, t]
            # log-weights of every predecessor at t-1 for each trajectory in the block
            lb = _backward_logits(xs, means[t - 1], logw[t - 1], q)
            pb = np.exp(lb - lb.max(axis=1, keepdims=True))
            cdf = np.cumsum(pb, axis=1)
            draws = rng.random(len(xs)) * cdf[:, -1]
            idx = np.minimum((cdf <= draws[:, None]).sum(axis=1), S - 1)
            out[lo:lo + _BLOCK, t - 1] = X[t - 1, idx]
    return ParticleCloud(out, np.full(n_backward, -np.log(n_backward)))
