import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinav.errors import ConfigError, DegenerateGeometry
from cinav.geodesy import RoadFrame
from cinav.ins import NavSolution
from cinav.stopline import (
    LineGeometry, StopLineMapEntry, StopLinePrior, build_stopline_observation, detect_first_stopped,
    distance_to_line, entry_to_dict, load_map, parse_entry, parse_map, solve_position, stopline_covariance,
    stopline_position,
)
from oracles import grid_search_position


def northbound(prior=StopLinePrior()):
    # stop line n = -9, left lane line e = 0, traffic heading north in e > 0
    return StopLineMapEntry(LineGeometry(1.0, 0.0, 9.0), LineGeometry(0.0, 1.0, 0.0), RoadFrame(0.0),
                            np.array([-1.0, 0.0]), np.array([0.0, 1.0]), prior)


def test_solve_position_axis_aligned():
    np.testing.assert_allclose(solve_position(northbound(), 3.3, 1.75), [-12.3, 1.75])


def test_stopline_position_uses_prior_means():
    p = StopLinePrior(m_xb=1.0, m_yb=1.75, l0=2.3)
    np.testing.assert_allclose(stopline_position(northbound(p)), [-9.0 - 3.3, 1.75])


def test_solve_position_rotated_road():
    # road heading 45 deg; stop line through (10, 10) perpendicular to the road
    u = np.array([1.0, 1.0]) / math.sqrt(2)
    left = np.array([-u[1], u[0]])
    stop = LineGeometry.through((10.0, 10.0), left)
    lane = LineGeometry.through((10.0, 10.0), u)
    e = StopLineMapEntry(stop, lane, RoadFrame.from_degrees(45.0), -u, -left)
    p = solve_position(e, 2.0, 1.0)
    np.testing.assert_allclose(p, np.array([10.0, 10.0]) - 2.0 * u - 1.0 * left, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(theta=st.floats(-math.pi, math.pi), skew=st.floats(0.3, 1.2), d_e=st.floats(0, 30), d_l=st.floats(0, 5),
       cn=st.floats(-100, 100), ce=st.floats(-100, 100))
def test_solution_satisfies_both_distances(theta, skew, d_e, d_l, cn, ce):
    u = np.array([math.cos(theta), math.sin(theta)])
    v = np.array([math.cos(theta + skew), math.sin(theta + skew)])
    stop = LineGeometry.through((cn, ce), v)
    lane = LineGeometry.through((cn, ce), u)
    approach = -u
    side = np.array([-u[1], u[0]])
    if abs(stop.normal @ approach) < 1e-3 or abs(lane.normal @ side) < 1e-3:
        return
    e = StopLineMapEntry(stop, lane, RoadFrame(theta), approach, side)
    p = solve_position(e, d_e, d_l)
    assert distance_to_line(stop, p) == pytest.approx(d_e, abs=1e-9)
    assert distance_to_line(lane, p) == pytest.approx(d_l, abs=1e-9)
    assert e.distance_behind(p) == pytest.approx(d_e, abs=1e-9)
    assert e.lateral_offset(p) == pytest.approx(d_l, abs=1e-9)


def test_solve_position_matches_grid_search_oracle():
    e = northbound()
    raw = {"stop": (1.0, 0.0, 9.0), "lane": (0.0, 1.0, 0.0), "approach": (-1.0, 0.0), "side": (0.0, 1.0)}
    got = solve_position(e, 3.3, 1.75)
    ref = grid_search_position(raw, 3.3, 1.75, center=(0.0, 0.0))
    assert np.max(np.abs(got - ref)) <= 2e-3


def test_parallel_lines_rejected():
    with pytest.raises(DegenerateGeometry):
        StopLineMapEntry(LineGeometry(1.0, 0.0, 9.0), LineGeometry(1.0, 0.0, 0.0), RoadFrame(0.0),
                         np.array([-1.0, 0.0]), np.array([0.0, 1.0]))


def test_negative_distance_rejected():
    with pytest.raises(ValueError):
        solve_position(northbound(), -1.0, 1.0)


def test_line_normalization():
    line = LineGeometry.from_coefficients(3.0, 4.0, 10.0)
    assert (line.a, line.b, line.c) == pytest.approx((0.6, 0.8, 2.0))
    with pytest.raises(ValueError):
        LineGeometry(3.0, 4.0, 1.0)
    with pytest.raises(ValueError):
        LineGeometry.from_coefficients(0.0, 0.0, 1.0)
    k = LineGeometry.from_slope_intercept(0.0, 2.0)  # e = 2
    assert k.signed((5.0, 2.0)) == pytest.approx(0.0)


def test_prior_validation():
    with pytest.raises(ValueError):
        StopLinePrior(sigma_xb=0.0)
    with pytest.raises(ValueError):
        StopLinePrior(m_xb=-1.0)


def test_stopline_covariance_rotates_with_road():
    p = StopLinePrior(sigma_xb=0.5, sigma_yb=0.3)
    np.testing.assert_allclose(stopline_covariance(northbound(p)), np.diag([0.25, 0.09]))
    e = StopLineMapEntry(LineGeometry(0.0, 1.0, 6.0), LineGeometry(1.0, 0.0, 0.0), RoadFrame.from_degrees(90.0),
                         np.array([0.0, -1.0]), np.array([-1.0, 0.0]), p)
    np.testing.assert_allclose(stopline_covariance(e), np.diag([0.09, 0.25]), atol=1e-15)


def test_build_observation_residual_and_jacobian(frame):
    e = northbound()
    p_sl = stopline_position(e)
    offset = np.array([0.4, -0.3])
    lat, lon, h = frame.to_geodetic(*(p_sl + offset))
    nav = NavSolution.from_euler(0, 0, 0, np.zeros(3), type(frame.origin)(lat, lon, h))
    obs = build_stopline_observation(nav, e, None, frame)
    assert obs.kind == "sp_sl" and obs.dim == 2
    np.testing.assert_allclose(obs.z, offset, atol=1e-6)
    # H maps a latitude error of 1 m worth of radians onto 1 m north
    assert obs.H[0, 6] == pytest.approx(frame.scale_n, rel=1e-5)
    assert obs.H[1, 7] == pytest.approx(frame.scale_e, rel=1e-5)
    np.testing.assert_allclose(obs.R, stopline_covariance(e))


class TestDetectFirstStopped:
    def test_stopped_at_line(self):
        assert detect_first_stopped(0.0, [-12.3, 1.75], northbound())

    def test_moving(self):
        assert not detect_first_stopped(0.5, [-12.3, 1.75], northbound())

    def test_too_far(self):
        assert not detect_first_stopped(0.0, [-30.0, 1.75], northbound())

    def test_past_line(self):
        assert not detect_first_stopped(0.0, [-8.0, 1.75], northbound())

    def test_vehicle_ahead(self):
        assert not detect_first_stopped(0.0, [-13.0, 1.75], northbound(), occupancy=[[-10.0, 1.75]])

    def test_vehicle_behind_does_not_matter(self):
        assert detect_first_stopped(0.0, [-12.3, 1.75], northbound(), occupancy=[[-19.0, 1.75]])


RAW = {
    "id": "nb",
    "stop_line": {"a": 1.0, "b": 0.0, "c": 9.0},
    "lane_line": {"a": 0.0, "b": 1.0, "c": 0.0},
    "theta_deg": 0.0,
    "approach_side": [-1.0, 0.0],
    "lane_side": [0.0, 1.0],
    "priors": {"m_xb": 1.2},
}


def test_parse_entry_round_trip():
    e = parse_entry(RAW)
    assert e.prior.m_xb == 1.2 and e.prior.sigma_xb == StopLinePrior().sigma_xb
    again = parse_entry(entry_to_dict(e))
    assert entry_to_dict(again) == entry_to_dict(e)


@pytest.mark.parametrize("mutate,where", [
    (lambda r: r.pop("theta_deg"), "map.entries[0].theta_deg"),
    (lambda r: r.update(stop_line={"a": 0.0, "b": 0.0, "c": 1.0}), "map.entries[0].stop_line"),
    (lambda r: r.update(approach_side=[1.0, 1.0]), "map.entries[0].approach_side"),
    (lambda r: r.update(lane_line={"a": 1.0, "b": 0.0, "c": 0.0}), "map.entries[0]"),
    (lambda r: r["priors"].update(sigma_xb=-1.0), "map.entries[0].priors"),
])
def test_parse_errors_name_the_field(mutate, where):
    raw = json.loads(json.dumps(RAW))
    mutate(raw)
    with pytest.raises(ConfigError) as info:
        parse_map({"entries": [raw]})
    assert info.value.where == where


def test_duplicate_ids_rejected():
    with pytest.raises(ConfigError):
        parse_map({"entries": [RAW, RAW]})


def test_load_map_reports_json_position(tmp_path):
    p = tmp_path / "map.json"
    p.write_text('{"entries": [\n  {"id": 1,}\n]}')
    with pytest.raises(ConfigError) as info:
        load_map(p)
    assert ":2:" in info.value.where
    p.write_text(json.dumps({"entries": [RAW]}))
    assert load_map(p)[0].id == "nb"
