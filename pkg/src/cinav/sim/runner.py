"""Multi-rate event loop running the four positioning methods on shared
sensor streams."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import _kernels as kern
from ..ekf import FilterState, UpdateRejected, gate, innovation, predict, stack, update
from ..errors import CoincidentPositions, StaleData
from ..geodesy import GeodeticPosition, LocalFrame, horizontal_scale, radii_of_curvature
from ..ins import (
    ACCEL_BIAS, ATT, GYRO_BIAS, N_STATES, POS, VEL, GnssFix, ImuNoise, NavSolution,
    gnss_observation, process_noise,
)
from ..rng import normals
from ..stopline import build_stopline_observation, detect_first_stopped
from ..v2v import (
    NeighborTable, RangeMeasurement, assemble_update, decode_beacon, emit_beacon, encode_beacon, range_observation,
    select_case,
)
from .config import METHODS, ScenarioConfig
from .sensors import SensorStreams, epoch_ticks, link_up, synthesize_sensors
from .traffic import TrafficLight, TruthTrajectory, generate_truth

log = logging.getLogger("cinav.sim")

COOPERATIVE = {"cp", "sl-cp"}
STOP_LINE = {"sl-sp", "sl-cp"}
PREDICT_HZ = 10.0
FLOOR_SIGMA = 1e-3


@dataclass
class Trace:
    """Estimate trace of one vehicle under one method, sampled at the
    measurement epochs."""

    vehicle: int
    method: str
    t: np.ndarray
    truth: np.ndarray  # (n, 2) NED
    est: np.ndarray  # (n, 2) NED
    cov: np.ndarray  # (n, 2, 2) horizontal position covariance, m^2
    case: list[str]

    @property
    def error(self) -> np.ndarray:
        return self.est - self.truth

    @property
    def err_norm(self) -> np.ndarray:
        return np.linalg.norm(self.error, axis=1)


@dataclass(frozen=True)
class Phase:
    index: int
    start: float
    end: float
    label: str


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    seed: int
    traces: dict[tuple[int, str], Trace]
    phases: list[Phase]
    flags: dict[int, np.ndarray]  # first-stopped flag at each output epoch
    epochs: np.ndarray  # output epoch times
    diagnostics: list[dict] = field(default_factory=list)


# -- per-vehicle filter -------------------------------------------------------

class _Agent:
    def __init__(self, vid, q, v, pos, P0, noise: ImuNoise, dt: float) -> None:
        self.vid = vid
        self.q, self.v, self.pos = q.copy(), v.copy(), pos.copy()
        self.fs = FilterState(np.zeros(N_STATES), P0.copy())
        self.bg = np.zeros(3)
        self.ba = np.zeros(3)
        self.noise = noise
        self.dt = dt
        self.k = 0
        self.k_pred = 0
        self.f_sum = np.zeros(3)
        self._nav = None
        self._q_cache: dict[int, np.ndarray] = {}

    def propagate(self, k: int, gyro: np.ndarray, accel: np.ndarray) -> None:
        if k <= self.k:
            return
        n = k - self.k
        self.q, self.v, self.pos, f_mean, _ = kern.mechanize_block(
            self.q, self.v, self.pos, gyro[self.k:k], accel[self.k:k], self.dt, self.bg, self.ba
        )
        self.f_sum += f_mean * n
        self.k = k
        self._nav = None

    def predict(self) -> None:
        n = self.k - self.k_pred
        if n <= 0:
            return
        dt = n * self.dt
        F = np.eye(N_STATES) + kern.error_dynamics(self.q, self.v, self.pos, self.f_sum / n) * dt
        Q = self._q_cache.get(n)
        if Q is None:
            Q = self._q_cache[n] = process_noise(dt, self.noise)
        self.fs = predict(self.fs, F, Q)
        self.k_pred = self.k
        self.f_sum[:] = 0.0

    def nav(self) -> NavSolution:
        if self._nav is None:
            self._nav = NavSolution(self.q, self.v, GeodeticPosition(*self.pos), self.k * self.dt)
        return self._nav

    def correct(self, obs) -> None:
        self.fs = update(self.fs, obs)
        x = self.fs.x
        self.q, self.v, self.pos = kern.feedback(self.q, self.v, self.pos, x)
        self._nav = None
        self.bg += x[GYRO_BIAS]
        self.ba += x[ACCEL_BIAS]
        x[:] = 0.0

    def horizontal(self, frame: LocalFrame):
        s_n, s_e = horizontal_scale(self.pos[0], self.pos[2])
        p = self.fs.P
        cov = np.array([[s_n * s_n * p[6, 6], s_n * s_e * p[6, 7]], [s_n * s_e * p[7, 6], s_e * s_e * p[7, 7]]])
        est = np.array([frame.scale_n * (self.pos[0] - frame.origin.latitude),
                        frame.scale_e * (self.pos[1] - frame.origin.longitude)])
        return est, cov


# -- setup helpers ------------------------------------------------------------

def _sig3(val) -> np.ndarray:
    return np.broadcast_to(np.asarray(val, dtype=float), (3,)).copy()


def initial_covariance(config: ScenarioConfig, pos: np.ndarray) -> np.ndarray:
    f = config.filter
    imu = config.noise["imu"]
    r_m, r_n = radii_of_curvature(pos[0])
    pos_m = _sig3(f["init_pos_sigma"])
    sig = np.concatenate(
        [
            np.radians(_sig3(f["init_att_sigma_deg"])),
            _sig3(f["init_vel_sigma"]),
            [pos_m[0] / (r_m + pos[2]), pos_m[1] / ((r_n + pos[2]) * math.cos(pos[0])), pos_m[2]],
            np.full(3, math.radians(imu["gyro_bias_deg_h"]) / 3600.0),
            np.full(3, imu["accel_bias"]),
        ]
    )
    return np.diag(sig**2)


def filter_noise(config: ScenarioConfig) -> ImuNoise:
    """Process-noise densities; filter overrides fall back to the sensor model."""
    imu, f = config.noise["imu"], config.filter
    arw = f["gyro_arw_deg_rt_h"] if f["gyro_arw_deg_rt_h"] is not None else imu["gyro_arw_deg_rt_h"]
    vrw = f["accel_vrw_m_s_rt_h"] if f["accel_vrw_m_s_rt_h"] is not None else imu["accel_vrw_m_s_rt_h"]
    return ImuNoise(math.radians(arw) / 60.0, vrw / 60.0)


def gnss_sigmas(config: ScenarioConfig, vid: int) -> tuple[np.ndarray, np.ndarray]:
    """Filter-side GNSS position and velocity sigmas.

    By default the position sigma is the white-noise equivalent of the
    receiver error: a Gauss-Markov bias with variance ``b**2`` and time
    constant ``tau`` sampled at rate ``f`` carries the information of one
    sample per ``2 tau f`` fixes, so its variance is scaled by that count.
    """
    f = config.filter
    g = config.vehicle_gnss(vid)
    if f["gnss_pos_sigma"] is not None:
        pos = _sig3(f["gnss_pos_sigma"])
    else:
        n_corr = max(1.0, 2.0 * g["bias_tau"] * config.rates["gnss"])
        bias = _sig3(g["bias_sigma"]) ** 2 + np.asarray(g["bias"], float) ** 2
        pos = np.sqrt(_sig3(g["pos_sigma"]) ** 2 + n_corr * bias)
    vel = _sig3(f["gnss_vel_sigma"]) if f["gnss_vel_sigma"] is not None else _sig3(g["vel_sigma"])
    return np.maximum(pos, FLOOR_SIGMA), np.maximum(vel, FLOOR_SIGMA)


def initial_error(config: ScenarioConfig, seed: int, vid: int, P0: np.ndarray) -> np.ndarray:
    """Initial navigation error drawn from the filter prior (navigation states only)."""
    w = normals(seed, (vid, "init"), 1, 9)[0]
    return config.noise["init_error_scale"] * np.sqrt(np.diag(P0)[:9]) * w


def first_stopped_flags(config: ScenarioConfig, truths: dict[int, TruthTrajectory], ticks: np.ndarray):
    """Truth-derived first-stopped role per vehicle at each tick, with the
    entry it applies to (``None`` when not first-stopped)."""
    tr = config.traffic
    ids = sorted(truths)
    flags = {v: np.zeros(len(ticks), dtype=bool) for v in ids}
    entries = {v: [None] * len(ticks) for v in ids}
    for n, k in enumerate(ticks):
        pos = {v: truths[v].ned[k] for v in ids}
        for entry in config.entries:
            in_lane = [v for v in ids if entry.in_lane(pos[v])]
            for v in in_lane:
                others = [pos[o] for o in in_lane if o != v]
                if detect_first_stopped(truths[v].speed[k], pos[v], entry, others, tr["v_stop"], tr["d_gate"]):
                    flags[v][n] = True
                    entries[v][n] = entry
    return flags, entries


def compute_phases(config: ScenarioConfig, times: np.ndarray, flags: dict[int, np.ndarray]) -> list[Phase]:
    """Partition ``[0, duration]`` at first-stopped role changes and at light
    changes of the signal groups used by the map."""
    cuts: dict[float, list[str]] = {}
    names = {v.id: v.name for v in config.vehicles}
    for vid in sorted(flags):
        f = flags[vid]
        for i in np.nonzero(f[1:] != f[:-1])[0] + 1:
            what = "stops first" if f[i] else "leaves first place"
            cuts.setdefault(round(float(times[i]), 9), []).append(f"{names[vid]} {what}")
        if len(f) and f[0]:
            cuts.setdefault(round(float(times[0]), 9), []).append(f"{names[vid]} stops first")
    groups = {e.signal_group for e in config.entries}
    for t, group, phase in TrafficLight(config.light).changes(config.duration):
        if group in groups:
            cuts.setdefault(round(float(t), 9), []).append(f"{group} {phase}")
    bounds = sorted(t for t in cuts if 0.0 < t < config.duration)
    edges = [0.0] + bounds + [config.duration]
    labels = ["start"] + ["; ".join(cuts[t]) for t in bounds]
    return [Phase(i, edges[i], edges[i + 1], labels[i]) for i in range(len(edges) - 1)]


# -- event loop ---------------------------------------------------------------

def _run_method(config, method, truths, sensors, seed, frame, ticks, out_mask, fs_flags, fs_entries, diags):
    rate = config.rates["imu"]
    dt = 1.0 / rate
    filt = config.filter
    coop = method in COOPERATIVE
    use_sl = method in STOP_LINE
    ids = sorted(truths)
    noise = filter_noise(config)
    agents = {}
    for vid in ids:
        tr = truths[vid]
        P0 = initial_covariance(config, tr.position[0])
        e = initial_error(config, seed, vid, P0)
        q0 = kern.qmul(kern.rv2q(-e[ATT]), tr.attitude[0])
        agents[vid] = _Agent(vid, q0 / np.linalg.norm(q0), tr.velocity[0] + e[VEL], tr.position[0] + e[POS],
                             P0, noise, dt)
    sigmas = {vid: gnss_sigmas(config, vid) for vid in ids}
    v2v_sigma = max(filt["v2v_sigma"] if filt["v2v_sigma"] is not None else config.noise["v2v_sigma"], FLOOR_SIGMA)
    tables = {vid: NeighborTable(filt["staleness"]) for vid in ids}
    gnss_idx = {vid: {int(k): i for i, k in enumerate(sensors.gnss[vid].ticks)} for vid in ids}
    beacon_set = set(int(k) for k in sensors.beacon_ticks)
    range_idx = {p: {int(k): i for i, k in enumerate(r.ticks)} for p, r in sensors.ranges.items()}

    n_out = int(out_mask.sum())
    rec = {vid: (np.empty((n_out, 2)), np.empty((n_out, 2, 2)), []) for vid in ids}
    row = 0
    for n, k in enumerate(ticks):
        k = int(k)
        t = k * dt
        for vid in ids:
            a = agents[vid]
            a.propagate(k, sensors.gyro[vid], sensors.accel[vid])
            a.predict()
        if coop and k in beacon_set:
            for s in ids:
                a = agents[s]
                pkt = emit_beacon(a.fs, a.nav(), frame, bool(use_sl and fs_flags[s][n]), s)
                wire = encode_beacon(pkt)
                for r in ids:
                    if r != s and link_up(config, s, r, t, float(np.linalg.norm(truths[s].ned[k] - truths[r].ned[k]))):
                        tables[r].put_beacon(decode_beacon(wire)[0])
        if coop and (k in beacon_set or not filt["range_decimation"]):
            for (i, j), idx in range_idx.items():
                m = idx.get(k)
                if m is None:
                    continue
                d = float(sensors.ranges[(i, j)].distance[m])
                meas = RangeMeasurement(i, j, d, t, v2v_sigma)
                tables[i].put_range(meas, j)
                tables[j].put_range(meas, i)
        for vid in ids:
            a = agents[vid]
            nav = a.nav()
            self_obs = None
            sl_used = False
            gi = gnss_idx[vid].get(k)
            if gi is not None:
                g = sensors.gnss[vid]
                fix = GnssFix(t, GeodeticPosition(*g.position[gi]), g.velocity[gi])
                self_obs = gnss_observation(nav, fix, *sigmas[vid])
                if use_sl and fs_flags[vid][n]:
                    sl = build_stopline_observation(nav, fs_entries[vid][n], None, frame)
                    self_obs = stack([sl, self_obs], "sp_sl")
                    sl_used = True
            neighbor_obs = []
            if coop:
                for beacon, meas in tables[vid].ready(t):
                    nid = beacon.sender
                    tables[vid].entries[nid].rng = None  # each range is used once
                    try:
                        obs = range_observation(nav, frame, beacon, meas, filt["d_min"], filt["staleness"])
                    except (CoincidentPositions, StaleData) as exc:
                        diags.append({"t": t, "vehicle": vid, "method": method, "event": type(exc).__name__,
                                      "detail": str(exc)})
                        continue
                    if filt["gate_v2v"]:
                        y, S = innovation(a.fs, obs)
                        if not gate(y, S, filt["gate_alpha"]):
                            diags.append({"t": t, "vehicle": vid, "method": method, "event": "gated",
                                          "detail": f"neighbor {nid} innovation {float(y[0]):.3f} m"})
                            continue
                    neighbor_obs.append(obs)
            case = select_case(self_obs is not None, len(neighbor_obs))
            obs = assemble_update(case, self_obs, neighbor_obs)
            if obs is not None:
                try:
                    a.correct(obs)
                except UpdateRejected as exc:
                    log.warning("t=%.2f vehicle %d %s: update rejected (%s)", t, vid, method, exc)
                    diags.append({"t": t, "vehicle": vid, "method": method, "event": "UpdateRejected",
                                  "detail": str(exc)})
            if out_mask[n]:
                est, cov = a.horizontal(frame)
                rec[vid][0][row] = est
                rec[vid][1][row] = cov
                rec[vid][2].append(case.name.lower() + ("+sl" if sl_used else ""))
        if out_mask[n]:
            row += 1
    out_ticks = ticks[out_mask]
    return {
        (vid, method): Trace(vid, method, out_ticks * dt, truths[vid].ned[out_ticks].copy(), rec[vid][0],
                             rec[vid][1], rec[vid][2])
        for vid in ids
    }


def run_scenario(
    config: ScenarioConfig,
    methods=METHODS,
    seed: int | None = None,
    truths: dict[int, TruthTrajectory] | None = None,
    sensors: SensorStreams | None = None,
) -> ScenarioResult:
    """Run every requested method on identical truth and sensor streams."""
    if seed is not None and int(seed) != config.seed:
        config = config.with_seed(int(seed))
    seed = config.seed
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    truths = truths if truths is not None else generate_truth(config)
    sensors = sensors if sensors is not None else synthesize_sensors(truths, config, seed)
    frame = LocalFrame(config.origin)
    step = int(round(config.rates["imu"] / PREDICT_HZ))
    gnss_t = epoch_ticks(config, "gnss")
    beacon_t = sensors.beacon_ticks
    out_t = np.union1d(gnss_t, beacon_t)
    grid = [np.arange(step, config.n_ticks + 1, step), out_t, [config.n_ticks]]
    if any(m in COOPERATIVE for m in methods) and not config.filter["range_decimation"]:
        for r in sensors.ranges.values():
            grid.append(r.ticks)
    ticks = np.unique(np.concatenate([np.asarray(g, dtype=np.int64) for g in grid]))
    out_mask = np.isin(ticks, out_t)
    flags, entries = first_stopped_flags(config, truths, ticks)
    diags: list[dict] = []
    traces = {}
    for m in methods:
        traces.update(_run_method(config, m, truths, sensors, seed, frame, ticks, out_mask, flags, entries, diags))
    out_flags = {v: f[out_mask] for v, f in flags.items()}
    times = ticks[out_mask] / config.rates["imu"]
    phases = compute_phases(config, times, out_flags)
    return ScenarioResult(config, seed, traces, phases, out_flags, times, diags)
