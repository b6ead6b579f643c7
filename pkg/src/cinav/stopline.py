"""Stop-line geometry and the first-stopped-vehicle position correction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ekf import Observation
from .errors import ConfigError, DegenerateGeometry
from .geodesy import GeodeticPosition, LocalFrame, RoadFrame, rotate_road_covariance
from .ins import N_STATES, NavSolution, position_jacobian

MAX_SOLVE_CONDITION = 1e6


@dataclass(frozen=True)
class LineGeometry:
    """Line ``a*n + b*e + c = 0`` in the local horizontal NED plane, with
    ``a**2 + b**2 == 1``."""

    a: float
    b: float
    c: float

    def __post_init__(self) -> None:
        if abs(self.a**2 + self.b**2 - 1.0) > 1e-12:
            raise ValueError("line coefficients are not normalized; use LineGeometry.from_coefficients")

    @classmethod
    def from_coefficients(cls, a: float, b: float, c: float) -> "LineGeometry":
        norm = math.hypot(a, b)
        if norm == 0.0:
            raise ValueError("a and b cannot both be zero")
        return cls(a / norm, b / norm, c / norm)

    @classmethod
    def from_slope_intercept(cls, k: float, b: float) -> "LineGeometry":
        """Line ``e = k*n + b``."""
        return cls.from_coefficients(k, -1.0, b)

    @classmethod
    def through(cls, point, direction) -> "LineGeometry":
        """Line through ``point`` along ``direction`` (both NED-horizontal)."""
        dn, de = direction
        n0, e0 = point
        return cls.from_coefficients(-de, dn, de * n0 - dn * e0)

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b])

    def signed(self, p) -> float:
        return self.a * p[0] + self.b * p[1] + self.c


@dataclass(frozen=True)
class StopLinePrior:
    m_xb: float = 1.0
    sigma_xb: float = 0.5
    m_yb: float = 1.75
    sigma_yb: float = 0.3
    l0: float = 2.3

    def __post_init__(self) -> None:
        if self.sigma_xb <= 0 or self.sigma_yb <= 0:
            raise ValueError("prior standard deviations must be positive")
        if self.m_xb < 0 or self.m_yb < 0:
            raise ValueError("prior means must be non-negative")


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(2)
    return v / np.linalg.norm(v)


@dataclass(frozen=True, eq=False)
class StopLineMapEntry:
    stop_line: LineGeometry
    left_lane_line: LineGeometry
    road: RoadFrame
    approach_side: np.ndarray
    lane_side: np.ndarray
    prior: StopLinePrior = field(default_factory=StopLinePrior)
    id: str = ""
    lane_width: float = 3.5
    signal_group: str = "ns"

    def __post_init__(self) -> None:
        for name in ("approach_side", "lane_side"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(2)
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a unit vector")
            object.__setattr__(self, name, v)
        if abs(_cross(self.stop_line.normal, self.left_lane_line.normal)) <= 1e-6:
            raise DegenerateGeometry("stop line and lane line are parallel")
        if abs(self.stop_line.normal @ self.approach_side) < 1e-6:
            raise ValueError("approach_side is parallel to the stop line")
        if abs(self.left_lane_line.normal @ self.lane_side) < 1e-6:
            raise ValueError("lane_side is parallel to the lane line")

    def distance_behind(self, p) -> float:
        """Signed distance from the stop line, positive on the approach side."""
        return _side(self.stop_line, self.approach_side) * self.stop_line.signed(p)

    def lateral_offset(self, p) -> float:
        """Signed distance from the left lane line, positive inside the lane."""
        return _side(self.left_lane_line, self.lane_side) * self.left_lane_line.signed(p)

    def in_lane(self, p, depth: float = 150.0) -> bool:
        d = self.distance_behind(p)
        y = self.lateral_offset(p)
        return -0.5 <= d <= depth and 0.0 <= y <= self.lane_width


def _cross(u, v) -> float:
    return float(u[0] * v[1] - u[1] * v[0])


def _side(line: LineGeometry, towards) -> float:
    return 1.0 if line.normal @ towards > 0 else -1.0


def distance_to_line(line: LineGeometry, p) -> float:
    return abs(line.signed(p))


def solve_position(entry: StopLineMapEntry, d_e: float, d_l: float) -> np.ndarray:
    """Point at distance ``d_e`` behind the stop line and ``d_l`` inside the
    lane from the left lane line."""
    if d_e < 0 or d_l < 0:
        raise ValueError("distances must be non-negative")
    s_line, l_line = entry.stop_line, entry.left_lane_line
    A = np.array([[s_line.a, s_line.b], [l_line.a, l_line.b]])
    if np.linalg.cond(A) > MAX_SOLVE_CONDITION:
        raise DegenerateGeometry("stop line and lane line are nearly parallel")
    rhs = np.array(
        [
            _side(s_line, entry.approach_side) * d_e - s_line.c,
            _side(l_line, entry.lane_side) * d_l - l_line.c,
        ]
    )
    return np.linalg.solve(A, rhs)


def stopline_position(entry: StopLineMapEntry, prior: StopLinePrior | None = None) -> np.ndarray:
    prior = prior or entry.prior
    return solve_position(entry, prior.m_xb + prior.l0, prior.m_yb)


def stopline_covariance(entry: StopLineMapEntry, prior: StopLinePrior | None = None) -> np.ndarray:
    prior = prior or entry.prior
    return rotate_road_covariance(entry.road, np.diag([prior.sigma_xb**2, prior.sigma_yb**2]))


def build_stopline_observation(
    nav: NavSolution,
    entry: StopLineMapEntry,
    prior: StopLinePrior | None,
    origin: GeodeticPosition | LocalFrame,
) -> Observation:
    """Two-row observation: INS horizontal position minus the stop-line solution."""
    frame = origin if isinstance(origin, LocalFrame) else LocalFrame(origin)
    prior = prior or entry.prior
    p_sl = stopline_position(entry, prior)
    lat, lon, _ = nav.pos_array()
    p_ins = frame.to_ned(lat, lon)
    H = position_jacobian(nav)
    return Observation(p_ins - p_sl, H, stopline_covariance(entry, prior), "sp_sl")


def detect_first_stopped(
    speed: float,
    est_position,
    entry: StopLineMapEntry,
    occupancy=(),
    v_stop: float = 0.3,
    d_gate: float = 6.0,
) -> bool:
    """True for a (nearly) stationary vehicle close behind the stop line with
    no same-lane vehicle between it and the line."""
    if speed >= v_stop:
        return False
    d_self = entry.distance_behind(est_position)
    if not 0.0 <= d_self <= d_gate:
        return False
    for other in occupancy:
        d = entry.distance_behind(other)
        if 0.0 <= d < d_self:
            return False
    return True


# -- map file -----------------------------------------------------------------

def _num(obj, key, where):
    if key not in obj:
        raise ConfigError("missing field", f"{where}.{key}")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ConfigError(f"expected a finite number, got {val!r}", f"{where}.{key}")
    return float(val)


def _vec2(obj, key, where):
    val = obj.get(key)
    if not isinstance(val, (list, tuple)) or len(val) != 2:
        raise ConfigError("expected a 2-element list", f"{where}.{key}")
    try:
        v = np.array([float(x) for x in val])
    except (TypeError, ValueError):
        raise ConfigError("expected numbers", f"{where}.{key}") from None
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ConfigError("expected a unit vector", f"{where}.{key}")
    return v / np.linalg.norm(v)


def _line(obj, key, where):
    raw = obj.get(key)
    if not isinstance(raw, dict):
        raise ConfigError("expected an object with a, b, c", f"{where}.{key}")
    a, b, c = (_num(raw, k, f"{where}.{key}") for k in ("a", "b", "c"))
    try:
        return LineGeometry.from_coefficients(a, b, c)
    except ValueError as exc:
        raise ConfigError(str(exc), f"{where}.{key}") from None


def parse_entry(raw: dict, where: str = "entries[0]") -> StopLineMapEntry:
    if not isinstance(raw, dict):
        raise ConfigError("expected an object", where)
    pri = raw.get("priors", {})
    if not isinstance(pri, dict):
        raise ConfigError("expected an object", f"{where}.priors")
    defaults = StopLinePrior()
    vals = {}
    for k in ("m_xb", "sigma_xb", "m_yb", "sigma_yb", "l0"):
        vals[k] = _num(pri, k, f"{where}.priors") if k in pri else getattr(defaults, k)
    try:
        prior = StopLinePrior(**vals)
    except ValueError as exc:
        raise ConfigError(str(exc), f"{where}.priors") from None
    try:
        return StopLineMapEntry(
            stop_line=_line(raw, "stop_line", where),
            left_lane_line=_line(raw, "lane_line", where),
            road=RoadFrame.from_degrees(_num(raw, "theta_deg", where)),
            approach_side=_vec2(raw, "approach_side", where),
            lane_side=_vec2(raw, "lane_side", where),
            prior=prior,
            id=str(raw.get("id", where)),
            lane_width=_num(raw, "lane_width", where) if "lane_width" in raw else 3.5,
            signal_group=str(raw.get("signal_group", "ns")),
        )
    except (DegenerateGeometry, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), where) from None


def entry_to_dict(entry: StopLineMapEntry) -> dict:
    p = entry.prior
    return {
        "id": entry.id,
        "stop_line": {"a": entry.stop_line.a, "b": entry.stop_line.b, "c": entry.stop_line.c},
        "lane_line": {"a": entry.left_lane_line.a, "b": entry.left_lane_line.b, "c": entry.left_lane_line.c},
        "theta_deg": math.degrees(entry.road.theta),
        "approach_side": [float(x) for x in entry.approach_side],
        "lane_side": [float(x) for x in entry.lane_side],
        "lane_width": entry.lane_width,
        "signal_group": entry.signal_group,
        "priors": {"m_xb": p.m_xb, "sigma_xb": p.sigma_xb, "m_yb": p.m_yb, "sigma_yb": p.sigma_yb, "l0": p.l0},
    }


def parse_map(doc, where: str = "map") -> list[StopLineMapEntry]:
    entries = doc.get("entries") if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries:
        raise ConfigError("expected a non-empty list of entries", f"{where}.entries")
    out = [parse_entry(e, f"{where}.entries[{i}]") for i, e in enumerate(entries)]
    ids = [e.id for e in out]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate entry ids", f"{where}.entries")
    return out


def load_map(path) -> list[StopLineMapEntry]:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", f"{path}:{exc.lineno}:{exc.colno}") from None
    return parse_map(doc, str(path))
