import math

import numpy as np
import pytest

from cinav import _kernels as kern
from cinav.ekf import FilterState, update
from cinav.geodesy import EARTH_RATE, GeodeticPosition, horizontal_scale, normal_gravity
from cinav.ins import (
    N_STATES, ErrorState15, GnssFix, ImuSample, NavSolution, apply_feedback, build_transition, gnss_observation,
    mechanize, nav_difference, perturb, position_jacobian, process_noise, quat_from_euler,
)
from cinav.sim import builtin, generate_truth
from fd import STEP, column_errors, fd_rate_matrix, fd_transition, propagated_error, random_imu, random_nav
from oracles import A_WGS84, E2_WGS84


def stationary(origin, yaw=0.3):
    nav = NavSolution.from_euler(0.02, -0.01, yaw, np.zeros(3), origin)
    c = nav.dcm()
    lat = origin.latitude
    w_ie = np.array([EARTH_RATE * math.cos(lat), 0.0, -EARTH_RATE * math.sin(lat)])
    g = np.array([0.0, 0.0, normal_gravity(lat, origin.height)])
    return nav, ImuSample(0.0, c.T @ w_ie, -c.T @ g)


def meridian_radius(lat):
    return A_WGS84 * (1 - E2_WGS84) / (1 - E2_WGS84 * math.sin(lat) ** 2) ** 1.5


def prime_radius(lat):
    return A_WGS84 / math.sqrt(1 - E2_WGS84 * math.sin(lat) ** 2)


# -- mechanization ------------------------------------------------------------

def test_stationary_equilibrium(origin):
    nav, imu = stationary(origin)
    out = mechanize(nav, imu, 0.01)
    d = nav_difference(out, nav)
    assert np.abs(d[0:3]).max() <= 1e-8
    assert np.abs(d[3:6]).max() <= 1e-8
    assert abs(d[6]) * meridian_radius(origin.latitude) <= 1e-6
    assert abs(d[7]) * prime_radius(origin.latitude) <= 1e-6
    assert abs(d[8]) <= 1e-6
    assert out.timestamp == pytest.approx(0.01)


def test_uniform_north_acceleration(origin):
    nav = NavSolution.from_euler(0.0, 0.0, 0.0, np.zeros(3), origin)
    g = normal_gravity(origin.latitude, origin.height)
    imu = ImuSample(0.0, np.zeros(3), np.array([1.0, 0.0, -g]))
    for _ in range(100):
        nav = mechanize(nav, imu, 0.01)
    north = (nav.position.latitude - origin.latitude) * (meridian_radius(origin.latitude) + origin.height)
    assert nav.velocity[0] == pytest.approx(1.0, abs=1e-3)
    assert north == pytest.approx(0.5, abs=1e-3)


@pytest.mark.parametrize("dt", [0.0, -0.01, 0.2])
def test_mechanize_rejects_bad_step(origin, dt):
    nav, imu = stationary(origin)
    with pytest.raises(ValueError):
        mechanize(nav, imu, dt)


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_imu_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        ImuSample(0.0, [0.0, bad, 0.0], [0.0, 0.0, -9.8])


def test_nav_rejects_unnormalized_attitude(origin):
    with pytest.raises(ValueError):
        NavSolution(np.array([1.0, 1e-4, 0.0, 0.0]), np.zeros(3), origin)


def test_attitude_norm_preserved(rng, origin):
    nav = NavSolution.from_euler(0.1, 0.2, 0.3, np.array([5.0, 1.0, 0.0]), origin)
    g = normal_gravity(origin.latitude, origin.height)
    gyro = rng.uniform(-0.3, 0.3, (10000, 3))
    for k in range(10000):
        nav = mechanize(nav, ImuSample(k * 0.01, gyro[k], [0.1, 0.0, -g]), 0.01)
    assert abs(np.linalg.norm(nav.attitude) - 1.0) <= 1e-6


def test_mechanize_deterministic(rng):
    nav = random_nav(rng)
    imu = random_imu(rng, nav)
    a, b = mechanize(nav, imu, 0.01), mechanize(nav, imu, 0.01)
    assert np.array_equal(a.attitude, b.attitude)
    assert np.array_equal(a.velocity, b.velocity)
    assert np.array_equal(a.pos_array(), b.pos_array())


def test_mechanize_follows_synthesized_truth():
    cfg = builtin("consistency", duration=20.0)
    tr = generate_truth(cfg)[0]
    dt = 1.0 / cfg.rates["imu"]
    gyro, accel = kern.synthesize_imu(tr.attitude, tr.velocity, tr.position, dt)
    nav = NavSolution(tr.attitude[0], tr.velocity[0], GeodeticPosition(*tr.position[0]))
    for k in range(len(gyro)):
        nav = mechanize(nav, ImuSample(k * dt, gyro[k], accel[k]), dt)
    d = nav_difference(nav, NavSolution(tr.attitude[-1], tr.velocity[-1], GeodeticPosition(*tr.position[-1])))
    s_n, s_e = horizontal_scale(tr.position[-1, 0], tr.position[-1, 2])
    assert np.hypot(s_n * d[6], s_e * d[7]) <= 1e-6
    assert np.abs(d[3:6]).max() <= 1e-6
    assert np.abs(d[0:3]).max() <= 1e-8


# -- transition -----------------------------------------------------------------

def test_transition_zero_interval(rng):
    nav = random_nav(rng)
    F = build_transition(nav, random_imu(rng, nav), 1e-15)
    np.testing.assert_allclose(F, np.eye(N_STATES), rtol=0, atol=1e-12)


def test_transition_bias_blocks_identity(rng):
    nav = random_nav(rng)
    F = build_transition(nav, random_imu(rng, nav), 0.01)
    assert np.array_equal(F[9:15, 9:15], np.eye(6))


def test_transition_attitude_to_velocity_block(rng):
    nav = random_nav(rng)
    imu = random_imu(rng, nav)
    dt = 0.01
    F = build_transition(nav, imu, dt)
    f_n = nav.dcm() @ imu.accel
    expected = np.array([[0.0, -f_n[2], f_n[1]], [f_n[2], 0.0, -f_n[0]], [-f_n[1], f_n[0], 0.0]]) * dt
    np.testing.assert_allclose(F[3:6, 0:3], expected, rtol=1e-12, atol=1e-15)
    # the same block from finite differences of the nonlinear mechanization
    fd = fd_transition(nav, imu, dt)[3:6, 0:3]
    np.testing.assert_allclose(F[3:6, 0:3], fd, rtol=0, atol=5e-3 * np.abs(expected).max())


def test_transition_matches_finite_differences(rng):
    dt = 0.01
    for _ in range(40):
        nav = random_nav(rng)
        imu = random_imu(rng, nav)
        A = (build_transition(nav, imu, dt) - np.eye(N_STATES)) / dt
        assert column_errors(A, fd_rate_matrix(nav, imu, dt)).max() <= 1e-3


def test_small_perturbation_propagates_linearly(rng, origin):
    dt = 0.01
    for _ in range(100):
        nav = random_nav(rng, origin)
        imu = random_imu(rng, nav)
        dx = rng.standard_normal(N_STATES)
        dx *= 1e-6 / np.linalg.norm(dx)
        got = propagated_error(nav, imu, dt, dx)
        want = build_transition(nav, imu, dt) @ dx
        assert np.linalg.norm(got - want) <= 1e-3 * np.linalg.norm(want)


def test_process_noise_scales_with_dt():
    q1, q2 = process_noise(0.1), process_noise(0.2)
    np.testing.assert_allclose(q2, 2 * q1)
    assert np.all(np.diag(q1)[0:6] > 0)


# -- feedback -------------------------------------------------------------------

def test_feedback_zero_error_is_identity(rng):
    nav = random_nav(rng)
    out, bg, ba = apply_feedback(nav, ErrorState15())
    np.testing.assert_allclose(out.attitude, nav.attitude, atol=1e-15)
    assert np.array_equal(out.velocity, nav.velocity)
    assert np.array_equal(out.pos_array(), nav.pos_array())
    assert not bg.any() and not ba.any()


def test_feedback_velocity_sign(rng):
    nav = random_nav(rng)
    x = np.zeros(N_STATES)
    x[3] = 0.5
    out, _, _ = apply_feedback(nav, x)
    assert out.velocity[0] == pytest.approx(nav.velocity[0] - 0.5)


def test_feedback_returns_bias_estimates(rng):
    nav = random_nav(rng)
    x = rng.standard_normal(N_STATES) * 1e-3
    _, bg, ba = apply_feedback(nav, x)
    assert np.array_equal(bg, x[9:12])
    assert np.array_equal(ba, x[12:15])


def test_feedback_inverts_perturb(rng):
    for _ in range(20):
        nav = random_nav(rng)
        x = rng.standard_normal(N_STATES) * STEP
        err = perturb(nav, x)
        np.testing.assert_allclose(nav_difference(err, nav), x[:9], rtol=1e-6, atol=1e-12)
        back, _, _ = apply_feedback(err, x)
        np.testing.assert_allclose(nav_difference(back, nav), 0.0, atol=1e-12)


def test_feedback_rejects_non_finite(rng):
    x = np.zeros(N_STATES)
    x[4] = math.nan
    with pytest.raises(ValueError):
        apply_feedback(random_nav(rng), x)


def test_feedback_then_reestimate_shrinks(origin):
    truth = NavSolution.from_euler(0.0, 0.0, 0.5, np.array([3.0, 4.0, 0.0]), origin)
    x0 = np.zeros(N_STATES)
    x0[3:6] = [0.2, -0.1, 0.05]
    x0[6:9] = [2e-7, -3e-7, 1.5]
    nav = perturb(truth, x0)
    fix = GnssFix(0.0, truth.position, truth.velocity)
    P = np.diag([1e-4] * 3 + [0.25] * 3 + [1e-12, 1e-12, 4.0] + [1e-10] * 3 + [1e-4] * 3)
    fs = update(FilterState(np.zeros(N_STATES), P), gnss_observation(nav, fix, 0.5, 0.05))
    first = np.linalg.norm(fs.x[3:9] / STEP[3:9])
    nav, _, _ = apply_feedback(nav, fs.x)
    fs2 = update(FilterState(np.zeros(N_STATES), fs.P), gnss_observation(nav, fix, 0.5, 0.05))
    assert np.linalg.norm(fs2.x[3:9] / STEP[3:9]) < first


def test_error_state_vector_round_trip(rng):
    x = rng.standard_normal(N_STATES)
    assert np.array_equal(ErrorState15.from_vector(x).vector(), x)
    with pytest.raises(ValueError):
        ErrorState15.from_vector(np.zeros(14))


def test_quaternion_matches_euler(rng):
    r, p, y = 0.1, -0.2, 2.0
    c = NavSolution(quat_from_euler(r, p, y), np.zeros(3), GeodeticPosition(0.1, 0.2, 0.0)).dcm()
    cr, sr, cp, sp, cy, sy = math.cos(r), math.sin(r), math.cos(p), math.sin(p), math.cos(y), math.sin(y)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    np.testing.assert_allclose(c, rz @ ry @ rx, atol=1e-12)


# -- GNSS observation -------------------------------------------------------------

def test_gnss_observation_zero_at_truth(origin):
    nav = NavSolution.from_euler(0.0, 0.0, 0.0, np.array([1.0, 2.0, 0.0]), origin)
    obs = gnss_observation(nav, GnssFix(0.0, origin, nav.velocity), 0.5, 0.05)
    assert obs.dim == 6 and obs.kind == "sp"
    assert not obs.z.any()
    np.testing.assert_allclose(np.diag(obs.R), [0.05**2] * 3 + [0.25] * 3)


def test_gnss_observation_rows_scale_geodetic_errors(origin):
    lat, h = origin.latitude, origin.height
    nav = NavSolution.from_euler(0.0, 0.0, 0.0, np.zeros(3),
                                 GeodeticPosition(lat + 1e-6, origin.longitude - 2e-6, h - 0.7))
    obs = gnss_observation(nav, GnssFix(0.0, origin, np.zeros(3)), 1.0, 0.1)
    assert obs.z[3] == pytest.approx((meridian_radius(lat) + h) * 1e-6, rel=1e-6)
    assert obs.z[4] == pytest.approx(-(prime_radius(lat) + h) * math.cos(lat) * 2e-6, rel=1e-6)
    assert obs.z[5] == pytest.approx(0.7)
    x = np.zeros(N_STATES)
    x[6:9] = [1e-6, -2e-6, -0.7]
    np.testing.assert_allclose(obs.H @ x, obs.z, rtol=1e-6)


def test_position_jacobian_maps_to_metres(origin):
    nav = NavSolution.from_euler(0.0, 0.0, 0.0, np.zeros(3), origin)
    x = np.zeros(N_STATES)
    x[6], x[7] = 1e-6, 1e-6
    lat, h = origin.latitude, origin.height
    np.testing.assert_allclose(position_jacobian(nav) @ x,
                               [(meridian_radius(lat) + h) * 1e-6, (prime_radius(lat) + h) * math.cos(lat) * 1e-6],
                               rtol=1e-10)
