"""Squared-exponential ARD kernel and the parameter-free mean functions."""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, LinAlgError

from .errors import ConditioningError, InputShapeError, InvalidArgumentsError

MEAN_KINDS = ("linear-identity", "pdr-additive", "zero")

JITTER_START = 1e-9
JITTER_MAX = 1e-3


@dataclass(frozen=True)
class SeArdHyper:
    """Signal variance and per-dimension lengthscales of one scalar GP."""

    signal_variance: float
    lengthscales: np.ndarray = field(repr=False)

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        if ls.ndim != 1:
            raise InputShapeError("lengthscales must be a vector")
        if not self.signal_variance > 0 or not np.all(ls > 0):
            raise InvalidArgumentsError("signal variance and lengthscales must be positive")

    @property
    def input_dim(self):
        return self.lengthscales.shape[0]

    @property
    def log_params(self):
        """``[log signal_variance, log lengthscales...]``."""
        return np.concatenate([[np.log(self.signal_variance)], np.log(self.lengthscales)])

    @classmethod
    def from_log_params(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[0])), np.exp(theta[1:]))

    def to_dict(self):
        return {"signal_variance": self.signal_variance,
                "lengthscales": self.lengthscales.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["signal_variance"], np.asarray(d["lengthscales"], dtype=float))


@dataclass(frozen=True)
class MeanSpec:
    kind: str = "zero"

    def __post_init__(self):
        if self.kind not in MEAN_KINDS:
            raise InvalidArgumentsError(f"unknown mean kind {self.kind!r}")


LINEAR_IDENTITY = MeanSpec("linear-identity")
PDR_ADDITIVE = MeanSpec("pdr-additive")
ZERO_MEAN = MeanSpec("zero")


def _check_dim(x, hyper):
    if x.shape[-1] != hyper.input_dim:
        raise InputShapeError(
            f"input dimension {x.shape[-1]} does not match {hyper.input_dim} lengthscales")


def se_ard_eval(a, b, hyper):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    _check_dim(a, hyper)
    _check_dim(b, hyper)
    r = (a - b) / hyper.lengthscales
    return hyper.signal_variance * float(np.exp(-0.5 * np.dot(r, r)))


def scaled_sqdist(rows, cols, lengthscales):
    """Pairwise squared distances after dividing each axis by its lengthscale."""
    a = rows / lengthscales
    b = cols / lengthscales
    out = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        d = a[:, k, None] - b[None, :, k]
        out += d * d
    return out


def kernel_matrix(rows, cols, hyper):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    cols = np.atleast_2d(np.asarray(cols, dtype=float))
    _check_dim(rows, hyper)
    _check_dim(cols, hyper)
    return hyper.signal_variance * np.exp(-0.5 * scaled_sqdist(rows, cols, hyper.lengthscales))


def mean_eval(spec, x, u=None):
    x = np.asarray(x, dtype=float)
    if spec.kind == "linear-identity":
        return x.copy()
    if spec.kind == "zero":
        return np.zeros_like(x)
    if u is None:
        raise InvalidArgumentsError("pdr-additive mean needs a control input")
    u = np.asarray(u, dtype=float)
    if u.shape != x.shape:
        raise InvalidArgumentsError("control and state dimensions differ")
    return x + u


def jittered_cholesky(mat, scale):
    """Lower Cholesky factor of ``mat + jitter*I``.

    Jitter starts at ``1e-9*scale`` and grows tenfold up to ``1e-3*scale``.
    Returns ``(L, jitter)``.
    """
    n = mat.shape[0]
    jitter = JITTER_START * scale
    while jitter <= JITTER_MAX * scale * (1 + 1e-12):
        try:
            c, _ = cho_factor(mat + jitter * np.eye(n), lower=True, check_finite=True)
            return np.tril(c), jitter
        except (LinAlgError, ValueError):
            jitter *= 10.0
    raise ConditioningError("matrix is not positive definite even with maximal jitter")
