import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinav.geodesy import (
    ECC2, SEMI_MAJOR, GeodeticPosition, LocalFrame, RoadFrame, geodetic_delta_to_ned, horizontal_scale,
    normal_gravity, normalize_angle, radii_of_curvature, rotate_road_covariance,
)
from oracles import E2_WGS84, ecef_to_ned_matrix, geodetic_to_ecef, normal_gravity_reference

lats = st.floats(min_value=-1.5, max_value=1.5)


def test_constants_match_wgs84_definition():
    assert SEMI_MAJOR == 6378137.0
    assert ECC2 == pytest.approx(E2_WGS84, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(lat=lats, h=st.floats(min_value=-100.0, max_value=5000.0))
def test_radii_match_ecef_arc_derivatives(lat, h):
    # |d r_ecef / d lat| = R_M + h and |d r_ecef / d lon| = (R_N + h) cos(lat)
    eps = 1e-6
    d_lat = (geodetic_to_ecef(lat + eps, 0.3, h) - geodetic_to_ecef(lat - eps, 0.3, h)) / (2 * eps)
    d_lon = (geodetic_to_ecef(lat, 0.3 + eps, h) - geodetic_to_ecef(lat, 0.3 - eps, h)) / (2 * eps)
    r_m, r_n = radii_of_curvature(lat)
    assert np.linalg.norm(d_lat) == pytest.approx(r_m + h, rel=1e-8)
    assert np.linalg.norm(d_lon) == pytest.approx((r_n + h) * math.cos(lat), rel=1e-8, abs=1e-3)


def test_radii_equator_and_pole():
    r_m, r_n = radii_of_curvature(0.0)
    assert r_n == pytest.approx(SEMI_MAJOR)
    assert r_m == pytest.approx(SEMI_MAJOR * (1 - ECC2))
    r_m, r_n = radii_of_curvature(math.pi / 2)
    assert r_m == pytest.approx(r_n)


def test_radii_reject_bad_latitude():
    with pytest.raises(ValueError):
        radii_of_curvature(2.0)


@pytest.mark.parametrize("lat_deg", [0.0, 30.0, 39.95, 60.0, 89.0])
@pytest.mark.parametrize("h", [0.0, 55.0, 2000.0])
def test_normal_gravity_reference(lat_deg, h):
    lat = math.radians(lat_deg)
    assert normal_gravity(lat, h) == pytest.approx(normal_gravity_reference(lat, h), rel=1e-9)


def test_normal_gravity_known_values():
    assert normal_gravity(0.0, 0.0) == pytest.approx(9.7803253359, abs=1e-9)
    assert normal_gravity(math.pi / 2, 0.0) == pytest.approx(9.8321849378, abs=1e-6)


def test_geodetic_delta_to_ned_matches_ecef_difference(origin):
    delta = np.array([3e-6, -4e-6, 2.5])
    ned = geodetic_delta_to_ned(delta, origin).as_array()
    p0 = geodetic_to_ecef(origin.latitude, origin.longitude, origin.height)
    p1 = geodetic_to_ecef(origin.latitude + delta[0], origin.longitude + delta[1], origin.height + delta[2])
    ref = ecef_to_ned_matrix(origin.latitude, origin.longitude) @ (p1 - p0)
    np.testing.assert_allclose(ned, ref, atol=2e-3)


def test_horizontal_scale_consistent_with_radii(origin):
    s_n, s_e = horizontal_scale(origin.latitude, origin.height)
    r_m, r_n = radii_of_curvature(origin.latitude)
    assert s_n == pytest.approx(r_m + origin.height)
    assert s_e == pytest.approx((r_n + origin.height) * math.cos(origin.latitude))


@settings(max_examples=50, deadline=None)
@given(n=st.floats(-5000, 5000), e=st.floats(-5000, 5000), d=st.floats(-100, 100))
def test_local_frame_round_trip(n, e, d):
    frame = LocalFrame(GeodeticPosition.from_degrees(39.9543, 116.3157, 55.0))
    lat, lon, h = frame.to_geodetic(n, e, d)
    np.testing.assert_allclose(frame.to_ned(lat, lon, h), [n, e, d], atol=1e-7)


def test_local_frame_close_to_ecef_tangent_plane(frame, origin):
    lat, lon, h = frame.to_geodetic(300.0, -200.0)
    p0 = geodetic_to_ecef(origin.latitude, origin.longitude, origin.height)
    ref = ecef_to_ned_matrix(origin.latitude, origin.longitude) @ (geodetic_to_ecef(lat, lon, h) - p0)
    np.testing.assert_allclose(ref[:2], [300.0, -200.0], atol=0.05)


def test_geodetic_position_validation():
    with pytest.raises(ValueError):
        GeodeticPosition(2.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        GeodeticPosition(0.0, 4.0, 0.0)
    with pytest.raises(ValueError):
        GeodeticPosition(0.0, 0.0, float("nan"))


def test_normalize_angle():
    assert normalize_angle(3 * math.pi) == pytest.approx(-math.pi)
    assert normalize_angle(0.5) == pytest.approx(0.5)


def test_rotate_road_covariance_identity_and_quarter_turn():
    sig = np.diag([0.25, 0.09])
    np.testing.assert_allclose(rotate_road_covariance(RoadFrame(0.0), sig), sig)
    np.testing.assert_allclose(rotate_road_covariance(RoadFrame.from_degrees(90.0), sig), np.diag([0.09, 0.25]),
                               atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(theta=st.floats(-10, 10), a=st.floats(0.01, 4), b=st.floats(0.01, 4))
def test_rotate_road_covariance_preserves_spectrum(theta, a, b):
    out = rotate_road_covariance(RoadFrame(theta), np.diag([a, b]))
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(out)), np.sort([a, b]), rtol=1e-9, atol=1e-12)
    # longitudinal axis maps onto the road direction
    u = np.array([math.cos(theta), math.sin(theta)])
    assert u @ out @ u == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_rotate_road_covariance_rejects_bad_input():
    with pytest.raises(ValueError):
        rotate_road_covariance(RoadFrame(0.0), np.eye(3))
    with pytest.raises(ValueError):
        rotate_road_covariance(RoadFrame(0.0), np.array([[1.0, 0.5], [0.0, 1.0]]))
