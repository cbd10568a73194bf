"""Pedestrian dead reckoning: step detection, heading and control inputs.

Headings are measured clockwise from north, so a step of length ``L`` at
heading ``psi`` moves the walker by ``L * (sin psi, cos psi)`` in an
east/north frame.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from .errors import InvalidArgumentsError, NoDataError, OutOfRangeError

DEFAULT_WINDOW = 0.15
DEFAULT_PROMINENCE = 0.8
DEFAULT_MIN_INTERVAL = 0.3
DEFAULT_STEP_LENGTH = 0.7
POINTING_AXIS = np.array([0.0, 1.0, 0.0])  # device +y, screen facing the user


@dataclass(frozen=True)
class ImuLog:
    accel_t: np.ndarray
    accel_z: np.ndarray
    rot_t: np.ndarray
    rot_q: np.ndarray  # (n, 4) as (w, x, y, z)

    def __post_init__(self):
        for name in ("accel_t", "accel_z", "rot_t", "rot_q"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(np.diff(self.accel_t) <= 0) or np.any(np.diff(self.rot_t) <= 0):
            raise InvalidArgumentsError("timestamps must be strictly increasing")
        if len(self.rot_q) and np.any(np.abs(np.linalg.norm(self.rot_q, axis=1) - 1) > 1e-3):
            raise InvalidArgumentsError("rotation quaternions must be unit norm")


@dataclass(frozen=True)
class ControlInput:
    t: int
    u: np.ndarray
    step_length: float
    heading: float


def detect_steps(t, accel_z, window=DEFAULT_WINDOW, min_prominence=DEFAULT_PROMINENCE,
                 min_interval=DEFAULT_MIN_INTERVAL):
    """Timestamps of peaks in the rolling-mean vertical acceleration."""
    t = np.asarray(t, dtype=float)
    a = np.asarray(accel_z, dtype=float)
    if a.size == 0:
        raise NoDataError("empty acceleration series")
    if a.size < 2:
        return np.array([])
    rate = 1.0 / np.median(np.diff(t))
    width = max(int(round(window * rate)), 1)
    smooth = uniform_filter1d(a, size=width, mode="nearest")
    distance = max(int(np.ceil(min_interval * rate - 1e-9)), 1)
    peaks, _ = find_peaks(smooth, prominence=min_prominence, distance=distance)
    return t[peaks]


def quat_multiply(p, q):
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([pw * qw - px * qx - py * qy - pz * qz,
                     pw * qx + px * qw + py * qz - pz * qy,
                     pw * qy - px * qz + py * qw + pz * qx,
                     pw * qz + px * qy - py * qx + pz * qw])


def quat_rotate(q, v):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    R = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                  [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                  [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
    return R @ v


def yaw_quaternion(heading):
    """Device attitude whose pointing axis has the given clockwise-from-north heading."""
    # clockwise heading is a negative rotation about the world up axis
    return np.array([np.cos(heading / 2), 0.0, 0.0, -np.sin(heading / 2)])


def wrap_angle(a):
    a = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(a == -np.pi, np.pi, a)


def heading_from_quaternion(q):
    v = quat_rotate(q, POINTING_AXIS)
    return float(wrap_angle(np.arctan2(v[0], v[1])))


def heading_at(rot_t, rot_q, t):
    rot_t = np.asarray(rot_t, dtype=float)
    if len(rot_t) == 0 or t < rot_t[0] or t > rot_t[-1]:
        raise OutOfRangeError(f"time {t} outside rotation series")
    i = int(np.argmin(np.abs(rot_t - t)))
    return heading_from_quaternion(np.asarray(rot_q)[i])


def build_controls(steps, rot_t, rot_q, step_length=DEFAULT_STEP_LENGTH):
    if len(steps) == 0:
        raise NoDataError("no steps detected")
    out = []
    for k, ts in enumerate(steps, start=1):
        psi = heading_at(rot_t, rot_q, ts)
        u = step_length * np.array([np.sin(psi), np.cos(psi)])
        out.append(ControlInput(k, u, step_length, psi))
    return out


def controls_array(controls):
    if len(controls) == 0:
        return np.zeros((0, 2))
    if isinstance(controls[0], ControlInput):
        return np.array([c.u for c in controls])
    return np.asarray(controls, dtype=float).reshape(-1, 2)


def dead_reckon(x0, controls):
    u = controls_array(controls)
    x0 = np.asarray(x0, dtype=float)
    return np.vstack([x0, x0 + np.cumsum(u, axis=0)])


def process_imu(log, step_length=DEFAULT_STEP_LENGTH, window=DEFAULT_WINDOW,
                min_prominence=DEFAULT_PROMINENCE, min_interval=DEFAULT_MIN_INTERVAL):
    steps = detect_steps(log.accel_t, log.accel_z, window, min_prominence, min_interval)
    return build_controls(steps, log.rot_t, log.rot_q, step_length)
