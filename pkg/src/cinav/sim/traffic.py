"""Routes, signal timing, speed planning and truth trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..geodesy import ECC2, SEMI_MAJOR, LocalFrame
from ..rng import normals
from ..stopline import StopLineMapEntry
from .config import LightGroup, ScenarioConfig, VehicleConfig


# -- paths --------------------------------------------------------------------

@dataclass(frozen=True)
class _Segment:
    s0: float
    length: float
    start: np.ndarray
    heading: float
    curvature: float  # signed, positive turns right (heading increases)


class Path:
    """Planar polyline with circular fillets at interior waypoints, extended
    straight past the last waypoint. Heading is measured from north towards
    east."""

    def __init__(self, waypoints, turn_radius: float) -> None:
        pts = np.asarray(waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("need at least two [north, east] waypoints")
        segs: list[_Segment] = []
        cur = pts[0].copy()
        s = 0.0
        for i in range(1, len(pts) - 1):
            d_in = pts[i] - pts[i - 1]
            d_out = pts[i + 1] - pts[i]
            l_in, l_out = np.linalg.norm(d_in), np.linalg.norm(d_out)
            d_in, d_out = d_in / l_in, d_out / l_out
            turn = math.atan2(d_in[0] * d_out[1] - d_in[1] * d_out[0], d_in @ d_out)
            if abs(turn) < 1e-9:
                continue
            tangent = turn_radius * math.tan(abs(turn) / 2.0)
            room_in = np.linalg.norm(pts[i] - cur)
            if tangent > room_in + 1e-9 or tangent > (0.5 * l_out if i + 1 < len(pts) - 1 else l_out) + 1e-9:
                raise ValueError(f"turn radius {turn_radius} m too large for waypoint {i}")
            a = pts[i] - d_in * tangent
            heading_in = math.atan2(d_in[1], d_in[0])
            straight = float(np.linalg.norm(a - cur))
            if straight > 0:
                segs.append(_Segment(s, straight, cur.copy(), heading_in, 0.0))
                s += straight
            arc = turn_radius * abs(turn)
            segs.append(_Segment(s, arc, a, heading_in, math.copysign(1.0 / turn_radius, turn)))
            s += arc
            cur = pts[i] + d_out * tangent
        d_last = pts[-1] - cur
        if np.linalg.norm(d_last) < 1e-12:
            d_last = pts[-1] - pts[-2]
        segs.append(_Segment(s, math.inf, cur.copy(), math.atan2(d_last[1], d_last[0]), 0.0))
        self.segments = segs
        self._s0 = np.array([g.s0 for g in segs])
        self.length = s + float(np.linalg.norm(pts[-1] - cur))

    def evaluate(self, s):
        """Position (..., 2), heading (...) and signed curvature (...) at arc length ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        idx = np.clip(np.searchsorted(self._s0, s, side="right") - 1, 0, len(self.segments) - 1)
        pos = np.empty(s.shape + (2,))
        heading = np.empty(s.shape)
        kappa = np.empty(s.shape)
        for i, g in enumerate(self.segments):
            m = idx == i
            if not np.any(m):
                continue
            u = s[m] - g.s0
            if g.curvature == 0.0:
                pos[m, 0] = g.start[0] + u * math.cos(g.heading)
                pos[m, 1] = g.start[1] + u * math.sin(g.heading)
                heading[m] = g.heading
            else:
                r = 1.0 / g.curvature
                psi = g.heading + u * g.curvature
                pos[m, 0] = g.start[0] + r * (np.sin(psi) - math.sin(g.heading))
                pos[m, 1] = g.start[1] - r * (np.cos(psi) - math.cos(g.heading))
                heading[m] = psi
            kappa[m] = g.curvature
        return pos, heading, kappa


# -- traffic light ------------------------------------------------------------

@dataclass(frozen=True)
class TrafficLightState:
    phase: str
    time_in_phase: float

    def __post_init__(self) -> None:
        if self.phase not in ("red", "green"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.time_in_phase < 0:
            raise ValueError("time in phase must be non-negative")


class TrafficLight:
    """Per-signal-group red/green schedule; phases alternate and the duration
    list repeats cyclically."""

    def __init__(self, groups: dict[str, LightGroup]) -> None:
        self.groups = dict(groups)

    def _walk(self, group: str, t: float):
        g = self.groups[group]
        phase, start, i = g.initial, 0.0, 0
        while True:
            d = g.durations[i % len(g.durations)]
            if t < start + d:
                return phase, start, start + d
            start += d
            phase = "green" if phase == "red" else "red"
            i += 1

    def state(self, group: str, t: float) -> TrafficLightState:
        if t < 0:
            raise ValueError("time must be non-negative")
        phase, start, _ = self._walk(group, t)
        return TrafficLightState(phase, t - start)

    def phase_start(self, group: str, t: float) -> float:
        return self._walk(group, t)[1]

    def next_green(self, group: str, t: float) -> float:
        phase, _, end = self._walk(group, t)
        return t if phase == "green" else end

    def changes(self, t_end: float) -> list[tuple[float, str, str]]:
        """(time, group, new phase) for every transition in (0, t_end)."""
        out = []
        for group in sorted(self.groups):
            t = 0.0
            while True:
                phase, _, end = self._walk(group, t)
                if end >= t_end:
                    break
                out.append((end, group, "green" if phase == "red" else "red"))
                t = end
        return sorted(out)


# -- speed profiles -----------------------------------------------------------

@dataclass(frozen=True)
class _Leg:
    t0: float
    s0: float
    v0: float
    a: float


class SpeedProfile:
    """Piecewise constant-acceleration arc-length profile; the last leg runs
    forever."""

    def __init__(self, legs: list[_Leg]) -> None:
        self.legs = legs
        self._t0 = np.array([leg.t0 for leg in legs])

    def evaluate(self, t):
        """Arc length, speed and tangential acceleration at ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self._t0, t, side="right") - 1, 0, len(self.legs) - 1)
        t0 = self._t0[idx]
        s0 = np.array([leg.s0 for leg in self.legs])[idx]
        v0 = np.array([leg.v0 for leg in self.legs])[idx]
        a = np.array([leg.a for leg in self.legs])[idx]
        tau = t - t0
        return s0 + v0 * tau + 0.5 * a * tau**2, v0 + a * tau, a


@dataclass(frozen=True)
class StopEvent:
    entry_id: str
    queue_index: int
    t_arrive: float  # comes to rest
    t_depart: float  # starts moving again
    s_stop: float


def _cross_s(path: Path, f, s_from: float, s_max: float = 2000.0, step: float = 0.5) -> float:
    """First arc length after ``s_from`` where ``f(p(s))`` drops to zero."""
    s_grid = np.arange(s_from, s_from + s_max, step)
    pos, _, _ = path.evaluate(s_grid)
    vals = np.array([f(p) for p in pos])
    hit = np.nonzero((vals[:-1] > 0) & (vals[1:] <= 0))[0]
    if len(hit) == 0:
        return math.nan
    lo, hi = s_grid[hit[0]], s_grid[hit[0] + 1]
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(path.evaluate(mid)[0][0]) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def plan_vehicles(config: ScenarioConfig) -> dict[int, tuple[Path, SpeedProfile, list[StopEvent]]]:
    """Build path and speed profile for every vehicle. Vehicles stopping at
    the same red phase of the same entry queue up in configuration order."""
    light = TrafficLight(config.light)
    tr = config.traffic
    queues: dict[tuple[str, float], tuple[int, float]] = {}
    out = {}
    for i, veh in enumerate(config.vehicles):
        where = f"vehicles[{i}]"
        try:
            path = Path(veh.route.waypoints, veh.route.turn_radius)
        except ValueError as exc:
            raise ConfigError(str(exc), f"{where}.route") from None
        out[veh.id] = _plan_one(config, veh, path, light, queues, tr, where)
    return out


def _plan_one(config, veh: VehicleConfig, path: Path, light: TrafficLight, queues, tr, where):
    vc = veh.cruise_speed
    t, s = 0.0, 0.0
    legs: list[_Leg] = []
    stops: list[StopEvent] = []
    for entry_id in veh.route.entries:
        entry: StopLineMapEntry = config.entry(entry_id)
        s_line = _cross_s(path, entry.distance_behind, s)
        if math.isnan(s_line):
            raise ConfigError(f"route never crosses stop line {entry_id!r}", f"{where}.route.entries")
        t_line = t + (s_line - s) / vc
        group = entry.signal_group
        if group not in light.groups:
            raise ConfigError(f"no light schedule for signal group {group!r}", "light_schedule")
        if light.state(group, t_line).phase == "green":
            continue
        red_key = (entry_id, light.phase_start(group, t_line))
        k, last = queues.get(red_key, (0, 0.0))
        prior = entry.prior
        if k == 0:
            jitter = tr["stop_sigma"] * normals(config.seed, (veh.id, "stop", len(stops)), 1, 1)[0, 0]
            target = max(prior.m_xb + jitter, 0.0) + prior.l0
        else:
            target = last + tr["vehicle_length"] + tr["queue_gap"]
        queues[red_key] = (k + 1, target)
        s_stop = _cross_s(path, lambda p, d=target: entry.distance_behind(p) - d, s)
        if math.isnan(s_stop) or s_stop <= s:
            raise ConfigError(f"vehicle starts inside the queue at {entry_id!r}", f"{where}.route")
        decel = tr["decel"]
        s_brake = s_stop - vc**2 / (2.0 * decel)
        if s_brake < s:
            decel = vc**2 / (2.0 * (s_stop - s))
            if decel > tr["max_decel"] + 1e-12:
                raise ConfigError(
                    f"cannot stop for {entry_id!r} within {s_stop - s:.2f} m at {tr['max_decel']} m/s^2 "
                    f"(needs {decel:.2f})",
                    f"{where}.cruise_speed",
                )
            s_brake = s
        legs.append(_Leg(t, s, vc, 0.0))
        t_brake = t + (s_brake - s) / vc
        legs.append(_Leg(t_brake, s_brake, vc, -decel))
        t_rest = t_brake + vc / decel
        t_dep = max(t_rest, light.next_green(group, t_rest) + k * tr["start_delay"])
        legs.append(_Leg(t_rest, s_stop, 0.0, 0.0))
        legs.append(_Leg(t_dep, s_stop, 0.0, tr["accel"]))
        stops.append(StopEvent(entry_id, k, t_rest, t_dep, s_stop))
        t = t_dep + vc / tr["accel"]
        s = s_stop + vc**2 / (2.0 * tr["accel"])
    legs.append(_Leg(t, s, vc, 0.0))
    # collapse zero-length legs so evaluation picks the later one
    legs = [leg for j, leg in enumerate(legs) if j + 1 == len(legs) or legs[j + 1].t0 > leg.t0]
    return path, SpeedProfile(legs), stops


# -- truth --------------------------------------------------------------------

@dataclass
class TruthTrajectory:
    """Sampled truth for one vehicle plus the analytic generator behind it.

    ``position`` is geodetic (lat, lon rad; h m), ``velocity`` NED m/s,
    ``attitude`` body-to-NED quaternions and ``acceleration`` the horizontal
    NED acceleration.
    """

    vehicle: int
    t: np.ndarray
    ned: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    attitude: np.ndarray
    acceleration: np.ndarray
    speed: np.ndarray
    path: Path = field(repr=False)
    profile: SpeedProfile = field(repr=False)
    frame: LocalFrame = field(repr=False)
    stops: list[StopEvent] = field(default_factory=list)

    def at(self, t):
        """Analytic truth at arbitrary times; same fields as the samples."""
        return _kinematics(self.path, self.profile, self.frame, np.atleast_1d(np.asarray(t, dtype=float)))


def _kinematics(path: Path, profile: SpeedProfile, frame: LocalFrame, t: np.ndarray) -> dict:
    s, v, a_t = profile.evaluate(t)
    ned, heading, kappa = path.evaluate(s)
    c, sn = np.cos(heading), np.sin(heading)
    vel_plane = np.stack([v * c, v * sn], axis=-1)
    a_n = v**2 * kappa
    acc = np.stack([a_t * c - a_n * sn, a_t * sn + a_n * c], axis=-1)
    geo = frame.to_geodetic(ned[:, 0], ned[:, 1])
    lat, h = geo[:, 0], geo[:, 2]
    w = 1.0 - ECC2 * np.sin(lat) ** 2
    r_m = SEMI_MAJOR * (1.0 - ECC2) / w**1.5
    r_n = SEMI_MAJOR / np.sqrt(w)
    # scale planar rates so d(lat)/dt = v_n / (R_M + h) holds exactly
    vel = np.zeros((len(t), 3))
    vel[:, 0] = vel_plane[:, 0] * (r_m + h) / frame.scale_n
    vel[:, 1] = vel_plane[:, 1] * (r_n + h) * np.cos(lat) / frame.scale_e
    quat = np.zeros((len(t), 4))
    quat[:, 0] = np.cos(heading / 2.0)
    quat[:, 3] = np.sin(heading / 2.0)
    return {"t": t, "ned": ned, "position": geo, "velocity": vel, "attitude": quat, "acceleration": acc,
            "speed": v, "heading": heading}


def generate_truth(config: ScenarioConfig) -> dict[int, TruthTrajectory]:
    """Truth for every vehicle on the IMU tick grid ``0..n_ticks``."""
    frame = LocalFrame(config.origin)
    t = np.arange(config.n_ticks + 1) / config.rates["imu"]
    out = {}
    for vid, (path, profile, stops) in plan_vehicles(config).items():
        k = _kinematics(path, profile, frame, t)
        out[vid] = TruthTrajectory(
            vehicle=vid,
            t=t,
            ned=k["ned"],
            position=k["position"],
            velocity=k["velocity"],
            attitude=k["attitude"],
            acceleration=k["acceleration"],
            speed=k["speed"],
            path=path,
            profile=profile,
            frame=frame,
            stops=stops,
        )
    return out
