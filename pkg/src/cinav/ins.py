"""Strapdown INS: NED mechanization, 15-state error transition and feedback.

Error-state ordering (fixed)::

    0-2   attitude error (roll, pitch, yaw)        rad
    3-5   velocity error (N, E, D)                 m/s
    6-8   position error (lat, lon, height)        rad, rad, m
    9-11  gyro bias (x, y, z)                      rad/s
    12-14 accelerometer bias (x, y, z)             m/s^2

All errors are "computed minus true".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .geodesy import GeodeticPosition, horizontal_scale, radii_of_curvature

N_STATES = 15
ATT = slice(0, 3)
VEL = slice(3, 6)
POS = slice(6, 9)
GYRO_BIAS = slice(9, 12)
ACCEL_BIAS = slice(12, 15)
IDX_LAT = 6
IDX_LON = 7
IDX_HEIGHT = 8

MAX_STEP = 0.1


@dataclass(frozen=True, eq=False)
class ImuSample:
    timestamp: float
    gyro: np.ndarray  # rad/s, body
    accel: np.ndarray  # m/s^2 specific force, body

    def __post_init__(self) -> None:
        g = np.asarray(self.gyro, dtype=float).reshape(3)
        a = np.asarray(self.accel, dtype=float).reshape(3)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(a)) and math.isfinite(self.timestamp)):
            raise ValueError("IMU sample contains non-finite values")
        object.__setattr__(self, "gyro", g)
        object.__setattr__(self, "accel", a)


@dataclass
class NavSolution:
    """Full navigation state: body-to-NED attitude quaternion, NED velocity and
    geodetic position."""

    attitude: np.ndarray
    velocity: np.ndarray
    position: GeodeticPosition
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        self.attitude = np.asarray(self.attitude, dtype=float).reshape(4)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        norm = float(np.linalg.norm(self.attitude))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"attitude quaternion not normalized (norm={norm!r})")

    @classmethod
    def from_euler(cls, roll: float, pitch: float, yaw: float, velocity, position: GeodeticPosition,
                   timestamp: float = 0.0) -> "NavSolution":
        return cls(quat_from_euler(roll, pitch, yaw), velocity, position, timestamp)

    def pos_array(self) -> np.ndarray:
        return self.position.as_array()

    def dcm(self) -> np.ndarray:
        return kern.q2dcm(self.attitude)

    def euler(self) -> np.ndarray:
        return euler_from_dcm(self.dcm())


@dataclass
class ErrorState15:
    """Named view over a 15-component error vector."""

    attitude_err: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity_err: np.ndarray = field(default_factory=lambda: np.zeros(3))
    position_err: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_vector(cls, x) -> "ErrorState15":
        x = np.asarray(x, dtype=float)
        if x.shape != (N_STATES,):
            raise ValueError(f"error state must have {N_STATES} components, got {x.shape}")
        return cls(x[ATT].copy(), x[VEL].copy(), x[POS].copy(), x[GYRO_BIAS].copy(), x[ACCEL_BIAS].copy())

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.attitude_err, self.velocity_err, self.position_err, self.gyro_bias, self.accel_bias]
        ).astype(float)


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time IMU noise densities used to build process noise.

    Defaults: gyro ARW 0.3 deg/sqrt(h), accel VRW 0.05 m/s/sqrt(h), random-constant
    biases (zero bias PSD).
    """

    gyro_arw: float = math.radians(0.3) / 60.0  # rad/sqrt(s)
    accel_vrw: float = 0.05 / 60.0  # m/s/sqrt(s)
    gyro_bias_rw: float = 0.0
    accel_bias_rw: float = 0.0


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    return np.array(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ]
    )


def euler_from_dcm(c: np.ndarray) -> np.ndarray:
    roll = math.atan2(c[2, 1], c[2, 2])
    pitch = -math.asin(max(-1.0, min(1.0, c[2, 0])))
    yaw = math.atan2(c[1, 0], c[0, 0])
    return np.array([roll, pitch, yaw])


def _check_dt(dt: float) -> None:
    if not (dt > 0.0 and dt <= MAX_STEP + 1e-12):
        raise ValueError(f"time step must be in (0, {MAX_STEP}], got {dt}")


def mechanize(nav: NavSolution, imu: ImuSample, dt: float) -> NavSolution:
    """Advance ``nav`` by one IMU interval of length ``dt``.

    ``imu`` must already be bias-corrected. Attitude is integrated with the
    body rate and the NED frame rotation, velocity with the average-attitude
    specific force, normal gravity and Coriolis/transport terms, and position
    with the trapezoidal velocity and the local curvature radii.
    """
    _check_dt(dt)
    q, v, p = kern.mechanize_step(nav.attitude, nav.velocity, nav.pos_array(), imu.gyro, imu.accel, float(dt))
    return NavSolution(q, v, GeodeticPosition(*p), nav.timestamp + dt)


def continuous_dynamics(nav: NavSolution, specific_force) -> np.ndarray:
    """15x15 continuous-time error dynamics matrix evaluated at ``nav``."""
    f_b = np.asarray(specific_force, dtype=float).reshape(3)
    return kern.error_dynamics(nav.attitude, nav.velocity, nav.pos_array(), f_b)


def build_transition(nav: NavSolution, imu: ImuSample, dt: float) -> np.ndarray:
    """First-order discrete transition ``F = I + A dt``.

    Bias states are random constants, so their diagonal block stays identity.
    """
    _check_dt(dt)
    return np.eye(N_STATES) + continuous_dynamics(nav, imu.accel) * dt


def process_noise(dt: float, noise: ImuNoise = ImuNoise()) -> np.ndarray:
    """Discrete process noise for an interval ``dt``.

    The white gyro/accel noise enters isotropically, so rotating it into NED
    leaves the diagonal unchanged.
    """
    q = np.zeros(N_STATES)
    q[ATT] = noise.gyro_arw**2 * dt
    q[VEL] = noise.accel_vrw**2 * dt
    q[GYRO_BIAS] = noise.gyro_bias_rw**2 * dt
    q[ACCEL_BIAS] = noise.accel_bias_rw**2 * dt
    return np.diag(q)


def apply_feedback(nav: NavSolution, err) -> tuple[NavSolution, np.ndarray, np.ndarray]:
    """Remove an estimated error from ``nav``.

    Returns the corrected solution together with the gyro and accelerometer
    bias estimates, which the caller adds to its running bias correction and
    subtracts from subsequent raw IMU samples.
    """
    x = err.vector() if isinstance(err, ErrorState15) else np.asarray(err, dtype=float)
    if x.shape != (N_STATES,) or not np.all(np.isfinite(x)):
        raise ValueError("error estimate must be a finite 15-vector")
    q, v, (lat, lon, h) = kern.feedback(nav.attitude, nav.velocity, nav.pos_array(), x)
    out = NavSolution(q, v, GeodeticPosition(lat, lon, h), nav.timestamp)
    return out, x[GYRO_BIAS].copy(), x[ACCEL_BIAS].copy()


def perturb(nav: NavSolution, err) -> NavSolution:
    """Inverse of :func:`apply_feedback` for the navigation part: returns the
    solution whose error relative to ``nav`` is ``err``."""
    x = np.asarray(err, dtype=float)
    q = kern.qmul(kern.rv2q(-x[ATT]), nav.attitude)
    q = q / np.linalg.norm(q)
    lat, lon, h = nav.pos_array() + x[POS]
    return NavSolution(q, nav.velocity + x[VEL], GeodeticPosition(lat, lon, h), nav.timestamp)


def nav_difference(nav: NavSolution, ref: NavSolution) -> np.ndarray:
    """Error of ``nav`` relative to ``ref`` as a 9-vector (attitude, velocity, position)."""
    phi = kern.q2rv(kern.qmul(ref.attitude, kern.qconj(nav.attitude)))
    return np.concatenate([phi, nav.velocity - ref.velocity, nav.pos_array() - ref.pos_array()])


@dataclass(frozen=True, eq=False)
class GnssFix:
    timestamp: float
    position: GeodeticPosition
    velocity: np.ndarray  # NED m/s


def gnss_observation(nav: NavSolution, fix: GnssFix, pos_sigma, vel_sigma):
    """Loosely coupled self-positioning observation (velocity rows first).

    Position differences are expressed in NED meters; the H rows carry the
    corresponding radian-to-meter scaling (with the sign flip on height).
    """
    from .ekf import Observation

    pos_sigma = np.broadcast_to(np.asarray(pos_sigma, dtype=float), (3,))
    vel_sigma = np.broadcast_to(np.asarray(vel_sigma, dtype=float), (3,))
    lat, _, h = nav.pos_array()
    s_n, s_e = horizontal_scale(lat, h)
    d = nav.pos_array() - fix.position.as_array()
    z = np.empty(6)
    z[0:3] = nav.velocity - np.asarray(fix.velocity, dtype=float)
    z[3] = s_n * d[0]
    z[4] = s_e * d[1]
    z[5] = -d[2]
    hm = np.zeros((6, N_STATES))
    hm[0:3, VEL] = np.eye(3)
    hm[3, IDX_LAT] = s_n
    hm[4, IDX_LON] = s_e
    hm[5, IDX_HEIGHT] = -1.0
    r = np.diag(np.concatenate([vel_sigma**2, pos_sigma**2]))
    return Observation(z, hm, r, "sp")


def position_jacobian(nav: NavSolution) -> np.ndarray:
    """2x15 map from the error state to the horizontal NED position error."""
    lat, _, h = nav.pos_array()
    r_m, r_n = radii_of_curvature(lat)
    j = np.zeros((2, N_STATES))
    j[0, IDX_LAT] = r_m + h
    j[1, IDX_LON] = (r_n + h) * math.cos(lat)
    return j
