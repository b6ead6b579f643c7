"""Sensor synthesis on the integer IMU tick grid.

Every noise block comes from :mod:`cinav.rng` keyed by ``(seed, vehicle,
sensor)`` (ranges by the unordered vehicle pair), and row ``k`` of a block
belongs to IMU tick ``k``. Sensor rates therefore change which rows are read,
never which numbers are drawn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .._kernels import synthesize_imu
from ..geodesy import ECC2, SEMI_MAJOR, GeodeticPosition
from ..ins import GnssFix, ImuSample
from ..rng import normals
from ..v2v import RangeMeasurement
from .config import ScenarioConfig
from .traffic import TruthTrajectory

# dispatch order for events sharing a tick
ORDER_IMU, ORDER_GNSS, ORDER_BEACON, ORDER_RANGE = range(4)


@dataclass(frozen=True)
class BeaconSlot:
    timestamp: float
    vehicle: int


@dataclass
class GnssTrack:
    ticks: np.ndarray
    position: np.ndarray  # geodetic, (M, 3)
    velocity: np.ndarray  # NED, (M, 3)
    error_ned: np.ndarray  # total position error in NED meters, (M, 3)


@dataclass
class RangeTrack:
    ticks: np.ndarray
    distance: np.ndarray
    truth: np.ndarray


@dataclass
class SensorStreams:
    rate: float
    n_ticks: int
    gyro: dict[int, np.ndarray]  # raw samples, sample k spans ticks k..k+1
    accel: dict[int, np.ndarray]
    gyro_bias: dict[int, np.ndarray]
    accel_bias: dict[int, np.ndarray]
    gnss: dict[int, GnssTrack]
    ranges: dict[tuple[int, int], RangeTrack]
    beacon_ticks: np.ndarray
    range_sigma: float

    def events(self):
        """All sensor events in dispatch order: by tick, then IMU < GNSS <
        beacon < range, then vehicle id (pair for ranges)."""
        keyed = []
        for vid in sorted(self.gyro):
            keyed.append((np.arange(1, self.n_ticks + 1), ORDER_IMU, (vid,), ("imu", vid)))
            keyed.append((self.gnss[vid].ticks, ORDER_GNSS, (vid,), ("gnss", vid)))
            keyed.append((self.beacon_ticks, ORDER_BEACON, (vid,), ("beacon", vid)))
        for pair in sorted(self.ranges):
            keyed.append((self.ranges[pair].ticks, ORDER_RANGE, pair, ("range", pair)))
        rows = []
        for ticks, order, key, src in keyed:
            for i, k in enumerate(ticks):
                rows.append((int(k), order, key, i, src))
        rows.sort(key=lambda r: r[:3])
        for k, _, _, i, (kind, who) in rows:
            yield self._event(kind, who, i, k)

    def _event(self, kind, who, i, k):
        t = k / self.rate
        if kind == "imu":
            return ImuSample(t, self.gyro[who][i], self.accel[who][i])
        if kind == "gnss":
            g = self.gnss[who]
            return GnssFix(t, GeodeticPosition(*g.position[i]), g.velocity[i].copy())
        if kind == "beacon":
            return BeaconSlot(t, who)
        r = self.ranges[who]
        return RangeMeasurement(who[0], who[1], float(r.distance[i]), t, max(self.range_sigma, 1e-12))


def _sigma3(val) -> np.ndarray:
    return np.broadcast_to(np.asarray(val, dtype=float), (3,)).copy()


def epoch_ticks(config: ScenarioConfig, rate_key: str) -> np.ndarray:
    step = config.ticks_per(rate_key)
    off = config.offset_ticks(rate_key) if rate_key in ("gnss", "beacon") else 0
    first = off % step
    if first == 0:
        first = step  # nothing is measured at t = 0
    return np.arange(first, config.n_ticks + 1, step)


def link_up(config: ScenarioConfig, i: int, j: int, t: float, distance: float) -> bool:
    """Radio link between ``i`` and ``j`` at ``t``: inside comm range and not
    in a scripted outage (an outage without ``a``/``b`` silences every link)."""
    if distance > config.comm_range:
        return False
    for out in config.outages:
        if out["start"] <= t <= out["end"]:
            a, b = out.get("a"), out.get("b")
            if a is None and b is None:
                return False
            if {a, b} == {i, j} or (b is None and a in (i, j)) or (a is None and b in (i, j)):
                return False
    return True


def _imu(truth: TruthTrajectory, config: ScenarioConfig, seed: int, vid: int):
    dt = 1.0 / config.rates["imu"]
    gyro, accel = synthesize_imu(truth.attitude, truth.velocity, truth.position, dt)
    n = gyro.shape[0]
    imu = config.noise["imu"]
    bg = math.radians(imu["gyro_bias_deg_h"]) / 3600.0 * normals(seed, (vid, "gyro_bias"), 1, 3)[0]
    ba = imu["accel_bias"] * normals(seed, (vid, "accel_bias"), 1, 3)[0]
    arw = math.radians(imu["gyro_arw_deg_rt_h"]) / 60.0
    vrw = imu["accel_vrw_m_s_rt_h"] / 60.0
    gyro = gyro + bg
    accel = accel + ba
    if arw > 0:
        gyro = gyro + arw / math.sqrt(dt) * normals(seed, (vid, "gyro"), n, 3)
    if vrw > 0:
        accel = accel + vrw / math.sqrt(dt) * normals(seed, (vid, "accel"), n, 3)
    return gyro, accel, bg, ba


def _gnss(truth: TruthTrajectory, config: ScenarioConfig, seed: int, vid: int) -> GnssTrack:
    g = config.vehicle_gnss(vid)
    ticks = epoch_ticks(config, "gnss")
    n_all = config.n_ticks + 1
    pos_sigma = _sigma3(g["pos_sigma"])
    vel_sigma = _sigma3(g["vel_sigma"])
    bias_sigma = _sigma3(g["bias_sigma"])
    white = normals(seed, (vid, "gnss_pos"), n_all, 3)[ticks] * pos_sigma
    vel_noise = normals(seed, (vid, "gnss_vel"), n_all, 3)[ticks] * vel_sigma
    drive = normals(seed, (vid, "gnss_bias"), n_all, 3)[ticks]
    # first-order Gauss-Markov bias sampled at the fix epochs, started stationary
    bias = np.empty((len(ticks), 3))
    t = ticks / config.rates["imu"]
    for m in range(len(ticks)):
        if m == 0:
            bias[m] = bias_sigma * drive[m]
        else:
            phi = math.exp(-(t[m] - t[m - 1]) / g["bias_tau"])
            bias[m] = phi * bias[m - 1] + math.sqrt(1.0 - phi * phi) * bias_sigma * drive[m]
    err = bias + np.asarray(g["bias"], dtype=float) + white
    pos = truth.position[ticks]
    lat, h = pos[:, 0], pos[:, 2]
    w = 1.0 - ECC2 * np.sin(lat) ** 2
    r_m = SEMI_MAJOR * (1.0 - ECC2) / w**1.5
    r_n = SEMI_MAJOR / np.sqrt(w)
    meas = pos.copy()
    meas[:, 0] += err[:, 0] / (r_m + h)
    meas[:, 1] += err[:, 1] / ((r_n + h) * np.cos(lat))
    meas[:, 2] -= err[:, 2]
    return GnssTrack(ticks, meas, truth.velocity[ticks] + vel_noise, err)


def _ranges(truths: dict[int, TruthTrajectory], config: ScenarioConfig, seed: int) -> dict:
    step = config.ticks_per("range")
    ticks_all = np.arange(step, config.n_ticks + 1, step)
    sigma = config.noise["v2v_sigma"]
    rate = config.rates["imu"]
    out = {}
    for i, j in combinations(sorted(truths), 2):
        d = np.linalg.norm(truths[i].ned[ticks_all] - truths[j].ned[ticks_all], axis=1)
        keep = np.array([link_up(config, i, j, k / rate, dk) for k, dk in zip(ticks_all, d)], dtype=bool)
        ticks = ticks_all[keep]
        noise = normals(seed, (i, j, "range"), config.n_ticks + 1, 1)[ticks, 0] * sigma
        truth_d = d[keep]
        out[(i, j)] = RangeTrack(ticks, np.abs(truth_d + noise), truth_d)
    return out


def synthesize_sensors(truths: dict[int, TruthTrajectory], config: ScenarioConfig, seed: int | None = None) -> SensorStreams:
    seed = config.seed if seed is None else int(seed)
    gyro, accel, bgs, bas, gnss = {}, {}, {}, {}, {}
    for vid in sorted(truths):
        gyro[vid], accel[vid], bgs[vid], bas[vid] = _imu(truths[vid], config, seed, vid)
        gnss[vid] = _gnss(truths[vid], config, seed, vid)
    return SensorStreams(
        rate=config.rates["imu"],
        n_ticks=config.n_ticks,
        gyro=gyro,
        accel=accel,
        gyro_bias=bgs,
        accel_bias=bas,
        gnss=gnss,
        ranges=_ranges(truths, config, seed),
        beacon_ticks=epoch_ticks(config, "beacon"),
        range_sigma=config.noise["v2v_sigma"],
    )
