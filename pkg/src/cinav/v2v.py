"""Vehicle-to-vehicle payloads, the linearised range observation and the
update-case scheduler."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .ekf import FilterState, Observation, stack
from .errors import CoincidentPositions, StaleData
from .geodesy import GeodeticPosition, LocalFrame
from .ins import N_STATES, NavSolution, position_jacobian

D_MIN = 0.5
STALENESS = 0.25
WIRE_VERSION = 0x01
_LEN = struct.Struct("<I")
_BODY = struct.Struct("<BIddddddB")
FLAG_FIRST_STOPPED = 0x01


@dataclass(frozen=True, eq=False)
class BeaconPacket:
    sender: int
    timestamp: float
    position: np.ndarray  # NED horizontal, m
    pos_cov: np.ndarray  # 2x2, m^2
    first_stopped: bool = False

    def __post_init__(self) -> None:
        p = np.asarray(self.position, dtype=float).reshape(2)
        c = np.asarray(self.pos_cov, dtype=float).reshape(2, 2)
        a, b, d = c[0, 0], 0.5 * (c[0, 1] + c[1, 0]), c[1, 1]
        if abs(c[0, 1] - c[1, 0]) > 1e-9:
            raise ValueError("beacon covariance is not symmetric")
        if a < -1e-9 or d < -1e-9 or a * d - b * b < -1e-9 * max(1.0, a + d):
            raise ValueError("beacon covariance is not positive semidefinite")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "pos_cov", c)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BeaconPacket):
            return NotImplemented
        return (self.sender == other.sender and self.timestamp == other.timestamp
                and self.first_stopped == other.first_stopped and np.array_equal(self.position, other.position)
                and np.array_equal(self.pos_cov, other.pos_cov))

    __hash__ = None


@dataclass(frozen=True)
class RangeMeasurement:
    src: int
    dst: int
    distance: float
    timestamp: float
    sigma: float

    def __post_init__(self) -> None:
        if self.distance < 0:
            raise ValueError("distance must be non-negative")
        if self.sigma <= 0:
            raise ValueError("ranging sigma must be positive")


class Case(enum.Enum):
    NONE = 0
    CASE1 = 1  # local GNSS only
    CASE2 = 2  # beacons and ranges only
    CASE3 = 3  # both


def encode_beacon(packet: BeaconPacket) -> bytes:
    """Length-prefixed little-endian record, version byte first."""
    c = packet.pos_cov
    body = _BODY.pack(
        WIRE_VERSION,
        packet.sender,
        packet.timestamp,
        packet.position[0],
        packet.position[1],
        c[0, 0],
        c[0, 1],
        c[1, 1],
        FLAG_FIRST_STOPPED if packet.first_stopped else 0,
    )
    return _LEN.pack(len(body)) + body


def decode_beacon(buf: bytes, offset: int = 0) -> tuple[BeaconPacket, int]:
    """Decode one record starting at ``offset``; returns the packet and the
    offset just past it."""
    if len(buf) - offset < _LEN.size:
        raise ValueError("truncated beacon length prefix")
    (n,) = _LEN.unpack_from(buf, offset)
    start = offset + _LEN.size
    if n != _BODY.size or len(buf) - start < n:
        raise ValueError(f"bad beacon record length {n}")
    version, sender, t, pn, pe, c00, c01, c11, flags = _BODY.unpack_from(buf, start)
    if version != WIRE_VERSION:
        raise ValueError(f"unsupported beacon version {version:#x}")
    pkt = BeaconPacket(sender, t, np.array([pn, pe]), np.array([[c00, c01], [c01, c11]]),
                       bool(flags & FLAG_FIRST_STOPPED))
    return pkt, start + n


def decode_stream(buf: bytes) -> list[BeaconPacket]:
    out, off = [], 0
    while off < len(buf):
        pkt, off = decode_beacon(buf, off)
        out.append(pkt)
    return out


@dataclass
class _Neighbor:
    beacon: BeaconPacket | None = None
    rng: RangeMeasurement | None = None


@dataclass
class NeighborTable:
    """Latest beacon and range per neighbor, with age-based eviction."""

    staleness: float = STALENESS
    entries: dict[int, _Neighbor] = field(default_factory=dict)

    def put_beacon(self, pkt: BeaconPacket) -> None:
        self.entries.setdefault(pkt.sender, _Neighbor()).beacon = pkt

    def put_range(self, meas: RangeMeasurement, neighbor: int) -> None:
        self.entries.setdefault(neighbor, _Neighbor()).rng = meas

    def age(self, neighbor: int, now: float) -> float:
        e = self.entries[neighbor]
        stamps = [m.timestamp for m in (e.beacon, e.rng) if m is not None]
        return max(0.0, now - min(stamps)) if stamps else math.inf

    def evict(self, now: float) -> None:
        for nid in list(self.entries):
            e = self.entries[nid]
            if e.beacon is not None and now - e.beacon.timestamp > self.staleness:
                e.beacon = None
            if e.rng is not None and now - e.rng.timestamp > self.staleness:
                e.rng = None
            if e.beacon is None and e.rng is None:
                del self.entries[nid]

    def ready(self, now: float) -> list[tuple[BeaconPacket, RangeMeasurement]]:
        """Fresh (beacon, range) pairs sorted by neighbor id."""
        self.evict(now)
        out = []
        for nid in sorted(self.entries):
            e = self.entries[nid]
            if e.beacon is not None and e.rng is not None and abs(e.beacon.timestamp - e.rng.timestamp) <= self.staleness:
                out.append((e.beacon, e.rng))
        return out


def range_observation(
    nav_i: NavSolution,
    origin: GeodeticPosition | LocalFrame,
    beacon_j: BeaconPacket,
    meas: RangeMeasurement,
    d_min: float = D_MIN,
    staleness: float = STALENESS,
) -> Observation:
    """One-row range observation of vehicle i against neighbor j.

    The neighbor's position uncertainty is projected on the line of sight and
    added to the ranging variance.
    """
    if abs(beacon_j.timestamp - meas.timestamp) > staleness or abs(meas.timestamp - nav_i.timestamp) > staleness:
        raise StaleData("beacon/range/navigation timestamps differ by more than the staleness bound")
    frame = origin if isinstance(origin, LocalFrame) else LocalFrame(origin)
    lat, lon, _ = nav_i.pos_array()
    p_i = frame.to_ned(lat, lon)
    diff = p_i - beacon_j.position
    dist = float(np.hypot(diff[0], diff[1]))
    if dist <= d_min:
        raise CoincidentPositions(f"vehicles {dist:.3f} m apart (minimum {d_min} m)")
    u = diff / dist
    H = u @ position_jacobian(nav_i)
    r = float(u @ beacon_j.pos_cov @ u) + meas.sigma**2
    return Observation(np.array([dist - meas.distance]), H.reshape(1, N_STATES), np.array([[r]]), "v2v")


def line_of_sight(p_i, p_j) -> np.ndarray:
    d = np.asarray(p_i, dtype=float) - np.asarray(p_j, dtype=float)
    return d / np.linalg.norm(d)


def select_case(has_gnss: bool, neighbor_obs_ready: int) -> Case:
    if has_gnss and neighbor_obs_ready > 0:
        return Case.CASE3
    if has_gnss:
        return Case.CASE1
    if neighbor_obs_ready > 0:
        return Case.CASE2
    return Case.NONE


def assemble_update(case: Case, self_obs: Observation | None, neighbor_obs: list[Observation]) -> Observation | None:
    """Build the update observation for a case; ``None`` means prediction only."""
    if case is Case.NONE:
        return None
    if case is Case.CASE1:
        if self_obs is None:
            raise ValueError("Case 1 requires a self-positioning observation")
        return stack([self_obs], self_obs.kind)
    if not neighbor_obs:
        raise ValueError(f"{case.name} requires neighbor observations")
    if case is Case.CASE2:
        return stack(list(neighbor_obs), "v2v" if len(neighbor_obs) == 1 else "stacked")
    if self_obs is None:
        raise ValueError("Case 3 requires a self-positioning observation")
    return stack([self_obs, *neighbor_obs])


def emit_beacon(
    fs: FilterState,
    nav: NavSolution,
    origin: GeodeticPosition | LocalFrame,
    first_stopped: bool,
    sender: int = 0,
) -> BeaconPacket:
    frame = origin if isinstance(origin, LocalFrame) else LocalFrame(origin)
    J = position_jacobian(nav)[:, 6:8]
    lat, lon, _ = nav.pos_array()
    pos = frame.to_ned(lat, lon) - J @ fs.x[6:8]
    P = fs.P[6:8, 6:8]
    cov = J @ P @ J.T
    return BeaconPacket(sender, nav.timestamp, pos, 0.5 * (cov + cov.T), bool(first_stopped))
