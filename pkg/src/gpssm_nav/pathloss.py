"""Log-distance path-loss fitting and maximum-likelihood WiFi localization."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (InvalidArgumentsError, InvalidSampleError, NoMeasurementError,
                     RankDeficiencyError)

DISTANCE_CLAMP = 0.01
SIGMA_FLOOR = 1e-6
DEFAULT_THRESHOLD = -85.0
GRID_LEVELS = (2.0, 0.5, 0.1)


@dataclass(frozen=True)
class ApModel:
    ap_id: str
    position: np.ndarray
    a: float
    b: float
    sigma: float
    d0: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "ap_id", str(self.ap_id))
        if self.sigma < 0 or self.d0 <= 0:
            raise InvalidArgumentsError("sigma must be non-negative and d0 positive")

    def mean_rss(self, distance):
        return self.a + 10.0 * self.b * np.log10(distance / self.d0)

    def to_dict(self):
        return {"ap_id": self.ap_id, "position": self.position.tolist(), "a": self.a,
                "b": self.b, "sigma": self.sigma, "d0": self.d0}

    @classmethod
    def from_dict(cls, d):
        return cls(d["ap_id"], d["position"], d["a"], d["b"], d["sigma"], d.get("d0", 1.0))


@dataclass(frozen=True)
class RssScan:
    timestamp: float
    readings: dict = field(default_factory=dict)
    position: tuple = None  # ground truth when known (calibration scans)

    def filtered(self, threshold=DEFAULT_THRESHOLD):
        return RssScan(self.timestamp,
                       {k: v for k, v in self.readings.items() if v >= threshold},
                       self.position)


@dataclass(frozen=True)
class DeviceGeometry:
    height: float = 1.2

    def __post_init__(self):
        if self.height < 0:
            raise InvalidArgumentsError("device height must be non-negative")


def fit_pathloss(calib, d0=1.0, ap_id="ap", ap_position=None):
    """Least-squares fit of ``r = A + 10 B log10(d/d0)`` for a single AP.

    ``calib`` is a sequence of ``(distance_or_position, rss)``; when
    ``ap_position`` is given the first element is a 3-D position, otherwise
    it is the already computed distance.  sigma uses the ``n - 2`` residual
    denominator and is zero for an exactly interpolating fit.
    """
    pts = [np.asarray(p, dtype=float) for p, _ in calib]
    rss = np.array([r for _, r in calib], dtype=float)
    if ap_position is not None:
        ap_position = np.asarray(ap_position, dtype=float)
        dist = np.array([np.linalg.norm(p - ap_position) for p in pts])
    else:
        dist = np.array([float(p) for p in pts])
    if len(rss) < 2:
        raise RankDeficiencyError("need at least two samples")
    if np.any(dist <= 0):
        raise InvalidSampleError("sample located at the access point")
    z = 10.0 * np.log10(dist / d0)
    if np.ptp(z) <= 1e-12 * max(1.0, np.abs(z).max()):
        raise RankDeficiencyError("all samples at the same distance")
    design = np.column_stack([np.ones_like(z), z])
    coef, *_ = np.linalg.lstsq(design, rss, rcond=None)
    resid = rss - design @ coef
    dof = len(rss) - 2
    sigma = float(np.sqrt(resid @ resid / dof)) if dof > 0 else 0.0
    pos = ap_position if ap_position is not None else np.full(3, np.nan)
    return ApModel(ap_id, pos, float(coef[0]), float(coef[1]), sigma, d0)


def fit_all(samples, ap_positions, d0=1.0):
    """Fit every AP from ``samples[ap_id] = [(position3, rss), ...]``."""
    return {ap_id: fit_pathloss(rows, d0, ap_id, ap_positions[ap_id])
            for ap_id, rows in sorted(samples.items())}


def _loglik_points(X, scan, aps, geom):
    """Vectorised log-likelihood for each row of the ``(n, 2)`` array ``X``."""
    if not scan.readings:
        raise NoMeasurementError("scan has no readings")
    ids = list(scan.readings)
    missing = [k for k in ids if k not in aps]
    if missing:
        raise InvalidArgumentsError(f"no path-loss model for APs {missing}")
    P = np.array([aps[k].position for k in ids])
    r = np.array([scan.readings[k] for k in ids])
    A = np.array([aps[k].a for k in ids])
    B = np.array([aps[k].b for k in ids])
    s = np.maximum(np.array([aps[k].sigma for k in ids]), SIGMA_FLOOR)
    d0 = np.array([aps[k].d0 for k in ids])
    dz = geom.height - P[:, 2]
    d2 = ((X[:, 0:1] - P[None, :, 0]) ** 2 + (X[:, 1:2] - P[None, :, 1]) ** 2 + dz[None, :] ** 2)
    d = np.maximum(np.sqrt(d2), DISTANCE_CLAMP)
    mu = A + 10.0 * B * np.log10(d / d0)
    z = (r - mu) / s
    return np.sum(-0.5 * z * z - np.log(s) - 0.5 * np.log(2 * np.pi), axis=1)


def rss_loglik(x, scan, aps, geom=DeviceGeometry()):
    X = np.atleast_2d(np.asarray(x, dtype=float))
    out = _loglik_points(X, scan, aps, geom)
    return float(out[0]) if np.ndim(x) == 1 else out


def _axis(lo, hi, cell):
    n = int(np.floor((hi - lo) / cell + 1e-9))
    vals = lo + cell * np.arange(n + 1)
    if hi - vals[-1] > 1e-9:
        vals = np.append(vals, hi)
    return vals


def _best(X, scan, aps, geom):
    ll = _loglik_points(X, scan, aps, geom)
    # X rows are in lexicographic order, so argmax's first hit is the smallest coordinate
    i = int(np.argmax(ll))
    return X[i], ll[i], ll


def wifi_localize(scan, aps, geom=DeviceGeometry(), region=(0.0, 40.0, 0.0, 40.0),
                  levels=GRID_LEVELS):
    """Coarse-to-fine grid maximisation of :func:`rss_loglik` inside ``region``.

    Returns ``(estimate, loglik)``.
    """
    if not scan.readings:
        raise NoMeasurementError("scan has no readings")
    xmin, xmax, ymin, ymax = region
    if not (xmax > xmin and ymax > ymin):
        raise InvalidArgumentsError("degenerate search region")
    if len(scan.readings) < 3:
        warnings.warn("fewer than three APs in scan; position is poorly determined",
                      stacklevel=2)
    gx, gy = np.meshgrid(_axis(xmin, xmax, levels[0]), _axis(ymin, ymax, levels[0]),
                         indexing="ij")
    best, best_ll, _ = _best(np.column_stack([gx.ravel(), gy.ravel()]), scan, aps, geom)
    prev = levels[0]
    for cell in levels[1:]:
        n = int(round(prev / cell))
        offs = cell * np.arange(-n, n + 1)
        gx, gy = np.meshgrid(best[0] + offs, best[1] + offs, indexing="ij")
        X = np.column_stack([gx.ravel(), gy.ravel()])
        keep = ((X[:, 0] >= xmin - 1e-9) & (X[:, 0] <= xmax + 1e-9)
                & (X[:, 1] >= ymin - 1e-9) & (X[:, 1] <= ymax + 1e-9))
        cand, cand_ll, _ = _best(X[keep], scan, aps, geom)
        if cand_ll > best_ll or (cand_ll == best_ll and tuple(cand) < tuple(best)):
            best, best_ll = cand, cand_ll
        prev = cell
    return np.clip(best, [xmin, ymin], [xmax, ymax]), float(best_ll)
