"""Compiled inner loops for strapdown mechanization and error dynamics.

Quaternions are scalar-first ``[w, x, y, z]`` and rotate body vectors into
NED. Positions are ``[lat, lon, h]``. Attitude errors follow the phi-angle
convention ``C_computed = (I - [phi x]) C_true``.
"""

import math

import numpy as np
from numba import njit

from .geodesy import (
    EARTH_RATE,
    ECC2,
    FLATTENING,
    GRAVITY_EQUATOR,
    GRAVITY_K,
    GRAVITY_M,
    SEMI_MAJOR,
)


@njit(cache=True)
def radii(lat):
    s2 = math.sin(lat) ** 2
    w = 1.0 - ECC2 * s2
    r_n = SEMI_MAJOR / math.sqrt(w)
    r_m = SEMI_MAJOR * (1.0 - ECC2) / (w * math.sqrt(w))
    return r_m, r_n


@njit(cache=True)
def gravity(lat, h):
    s2 = math.sin(lat) ** 2
    g0 = GRAVITY_EQUATOR * (1.0 + GRAVITY_K * s2) / math.sqrt(1.0 - ECC2 * s2)
    a = SEMI_MAJOR
    return g0 * (1.0 - 2.0 / a * (1.0 + FLATTENING + GRAVITY_M - 2.0 * FLATTENING * s2) * h + 3.0 * h * h / (a * a))


@njit(cache=True)
def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@njit(cache=True)
def cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@njit(cache=True)
def qmul(a, b):
    return np.array(
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    )


@njit(cache=True)
def qconj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


@njit(cache=True)
def rv2q(rv):
    angle = math.sqrt(rv[0] ** 2 + rv[1] ** 2 + rv[2] ** 2)
    half = 0.5 * angle
    if angle < 1e-8:
        # series keeps the map smooth near zero
        k = 0.5 - angle * angle / 48.0
        c = 1.0 - angle * angle / 8.0
    else:
        k = math.sin(half) / angle
        c = math.cos(half)
    return np.array([c, k * rv[0], k * rv[1], k * rv[2]])


@njit(cache=True)
def q2rv(q):
    if q[0] < 0.0:
        q = -q
    s = math.sqrt(q[1] ** 2 + q[2] ** 2 + q[3] ** 2)
    if s < 1e-12:
        k = 2.0 / q[0]
    else:
        k = 2.0 * math.atan2(s, q[0]) / s
    return np.array([k * q[1], k * q[2], k * q[3]])


@njit(cache=True)
def q2dcm(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


@njit(cache=True)
def frame_rates(pos, v):
    """Earth rate and transport rate, both resolved in NED."""
    lat, h = pos[0], pos[2]
    r_m, r_n = radii(lat)
    w_ie = np.array([EARTH_RATE * math.cos(lat), 0.0, -EARTH_RATE * math.sin(lat)])
    w_en = np.array([v[1] / (r_n + h), -v[0] / (r_m + h), -v[1] * math.tan(lat) / (r_n + h)])
    return w_ie, w_en


@njit(cache=True)
def mechanize_step(q, v, pos, w_b, f_b, dt):
    w_ie, w_en = frame_rates(pos, v)
    w_in = w_ie + w_en
    q_new = qmul(qmul(rv2q(-w_in * dt), q), rv2q(w_b * dt))
    q_new = q_new / math.sqrt(q_new[0] ** 2 + q_new[1] ** 2 + q_new[2] ** 2 + q_new[3] ** 2)

    c_avg = 0.5 * (q2dcm(q) + q2dcm(q_new))
    f_n = c_avg @ f_b
    g = np.array([0.0, 0.0, gravity(pos[0], pos[2])])
    acc = f_n + g - cross(2.0 * w_ie + w_en, v)
    v_new = v + acc * dt

    lat, h = pos[0], pos[2]
    r_m, r_n = radii(lat)
    v_mid = 0.5 * (v + v_new)
    pos_new = np.empty(3)
    pos_new[0] = lat + v_mid[0] * dt / (r_m + h)
    pos_new[1] = pos[1] + v_mid[1] * dt / ((r_n + h) * math.cos(lat))
    pos_new[2] = h - v_mid[2] * dt
    return q_new, v_new, pos_new


@njit(cache=True)
def mechanize_block(q, v, pos, gyro, accel, dt, gyro_bias, accel_bias):
    """Mechanize a run of IMU samples; returns the final state and the mean
    bias-corrected specific force and angular rate over the run."""
    f_sum = np.zeros(3)
    w_sum = np.zeros(3)
    n = gyro.shape[0]
    for k in range(n):
        w_b = gyro[k] - gyro_bias
        f_b = accel[k] - accel_bias
        q, v, pos = mechanize_step(q, v, pos, w_b, f_b, dt)
        f_sum += f_b
        w_sum += w_b
    if n > 0:
        f_sum /= n
        w_sum /= n
    return q, v, pos, f_sum, w_sum


@njit(cache=True)
def error_dynamics(q, v, pos, f_b):
    """Continuous-time 15x15 error dynamics matrix (phi-angle NED model)."""
    lat, h = pos[0], pos[2]
    r_m, r_n = radii(lat)
    rmh = r_m + h
    rnh = r_n + h
    sl, cl, tl = math.sin(lat), math.cos(lat), math.tan(lat)
    vn, ve = v[0], v[1]
    c_bn = q2dcm(q)
    f_n = c_bn @ f_b
    w_ie, w_en = frame_rates(pos, v)
    w_in = w_ie + w_en

    # d(w_en)/d(v), d(w_ie)/d(pos), d(w_en)/d(pos)
    dwen_dv = np.zeros((3, 3))
    dwen_dv[0, 1] = 1.0 / rnh
    dwen_dv[1, 0] = -1.0 / rmh
    dwen_dv[2, 1] = -tl / rnh
    dwie_dp = np.zeros((3, 3))
    dwie_dp[0, 0] = -EARTH_RATE * sl
    dwie_dp[2, 0] = -EARTH_RATE * cl
    # latitude derivatives of the curvature radii
    w = 1.0 - ECC2 * sl * sl
    drm = 3.0 * SEMI_MAJOR * (1.0 - ECC2) * ECC2 * sl * cl / (w * w * math.sqrt(w))
    drn = SEMI_MAJOR * ECC2 * sl * cl / (w * math.sqrt(w))
    dwen_dp = np.zeros((3, 3))
    dwen_dp[0, 0] = -ve * drn / (rnh * rnh)
    dwen_dp[1, 0] = vn * drm / (rmh * rmh)
    dwen_dp[2, 0] = -ve / (rnh * cl * cl) + ve * tl * drn / (rnh * rnh)
    dwen_dp[0, 2] = -ve / (rnh * rnh)
    dwen_dp[1, 2] = vn / (rmh * rmh)
    dwen_dp[2, 2] = ve * tl / (rnh * rnh)

    a = np.zeros((15, 15))
    # attitude
    a[0:3, 0:3] = -skew(w_in)
    a[0:3, 3:6] = dwen_dv
    a[0:3, 6:9] = dwie_dp + dwen_dp
    a[0:3, 9:12] = -c_bn
    # velocity
    v_x = skew(v)
    a[3:6, 0:3] = skew(f_n)
    a[3:6, 3:6] = -skew(2.0 * w_ie + w_en) + v_x @ dwen_dv
    a[3:6, 6:9] = v_x @ (2.0 * dwie_dp + dwen_dp)
    eps = 1e-6
    a[5, 6] += (gravity(lat + eps, h) - gravity(lat - eps, h)) / (2.0 * eps)
    a[5, 8] += (gravity(lat, h + 1.0) - gravity(lat, h - 1.0)) / 2.0
    a[3:6, 12:15] = c_bn
    # position
    a[6, 3] = 1.0 / rmh
    a[6, 6] = -vn * drm / (rmh * rmh)
    a[6, 8] = -vn / (rmh * rmh)
    a[7, 4] = 1.0 / (rnh * cl)
    a[7, 6] = ve * tl / (rnh * cl) - ve * drn / (rnh * rnh * cl)
    a[7, 8] = -ve / (rnh * rnh * cl)
    a[8, 5] = -1.0
    return a


@njit(cache=True)
def synthesize_imu(q, v, pos, dt):
    """Inverse mechanization: the IMU samples that carry the state sequence
    ``(q[k], v[k], pos[k])`` to ``k + 1`` under :func:`mechanize_step`.

    Sample ``k`` covers the interval ``[t_k, t_{k+1}]``.
    """
    n = q.shape[0] - 1
    gyro = np.empty((n, 3))
    accel = np.empty((n, 3))
    for k in range(n):
        w_ie, w_en = frame_rates(pos[k], v[k])
        w_in = w_ie + w_en
        q_b = qmul(qmul(qconj(q[k]), qconj(rv2q(-w_in * dt))), q[k + 1])
        gyro[k] = q2rv(q_b) / dt
        g = np.array([0.0, 0.0, gravity(pos[k, 0], pos[k, 2])])
        f_n = (v[k + 1] - v[k]) / dt - g + cross(2.0 * w_ie + w_en, v[k])
        c_avg = 0.5 * (q2dcm(q[k]) + q2dcm(q[k + 1]))
        accel[k] = np.linalg.solve(c_avg, f_n)
    return gyro, accel


@njit(cache=True)
def joseph_update(x, P, z, H, R, max_condition):
    """Kalman update with a hand-rolled Cholesky of S and the Joseph-form
    covariance. Status: 0 ok, 1 S not positive definite, 2 ill-conditioned."""
    m = z.shape[0]
    n = x.shape[0]
    y = z - H @ x
    PHt = P @ H.T
    S = H @ PHt + R
    S = 0.5 * (S + S.T)
    L = np.zeros((m, m))
    for j in range(m):
        d = S[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if not d > 0.0:
            return x, P, y, 1
        L[j, j] = math.sqrt(d)
        for i in range(j + 1, m):
            acc = S[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    dmax = 0.0
    dmin = np.inf
    for j in range(m):
        dmax = max(dmax, L[j, j])
        dmin = min(dmin, L[j, j])
    if (dmax / dmin) ** 2 > max_condition:
        return x, P, y, 2
    # K^T = S^-1 (P H^T)^T via two triangular solves
    B = PHt.T.copy()
    for c in range(n):
        for i in range(m):
            acc = B[i, c]
            for k in range(i):
                acc -= L[i, k] * B[k, c]
            B[i, c] = acc / L[i, i]
        for i in range(m - 1, -1, -1):
            acc = B[i, c]
            for k in range(i + 1, m):
                acc -= L[k, i] * B[k, c]
            B[i, c] = acc / L[i, i]
    K = B.T
    x_new = x + K @ y
    IKH = np.eye(n) - K @ H
    P_new = IKH @ P @ IKH.T + K @ R @ K.T
    return x_new, 0.5 * (P_new + P_new.T), y, 0


@njit(cache=True)
def feedback(q, v, pos, x):
    """Remove error estimate ``x`` from the navigation state."""
    q_new = qmul(rv2q(x[0:3]), q)
    q_new = q_new / math.sqrt(q_new[0] ** 2 + q_new[1] ** 2 + q_new[2] ** 2 + q_new[3] ** 2)
    return q_new, v - x[3:6], pos - x[6:9]
