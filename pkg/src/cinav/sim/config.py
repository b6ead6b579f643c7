"""Scenario configuration: JSON schema, defaults and validation.

Every validation failure raises :class:`~cinav.errors.ConfigError` naming the
offending field as a dotted path (``vehicles[1].route.waypoints``); JSON syntax
errors carry ``file:line:col``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..geodesy import GeodeticPosition
from ..stopline import StopLineMapEntry, load_map, parse_map

DEFAULTS: dict = {
    "name": "scenario",
    "seed": 0,
    "duration": 60.0,
    "origin": {"lat_deg": 39.95, "lon_deg": 116.32, "height": 50.0},
    "light_schedule": {"ns": {"initial": "green", "durations": [1.0e9]}},
    "rates": {"imu": 100.0, "gnss": 5.0, "beacon": 5.0, "range": 100.0, "gnss_offset": 0.0, "beacon_offset": 0.1},
    "noise": {
        "gnss": {
            "pos_sigma": 0.5,
            "vel_sigma": 0.05,
            "bias_sigma": 3.0,
            "bias_tau": 60.0,
            "bias": [0.0, 0.0, 0.0],
        },
        "imu": {
            "gyro_arw_deg_rt_h": 0.3,
            "accel_vrw_m_s_rt_h": 0.05,
            "gyro_bias_deg_h": 10.0,
            "accel_bias": 0.02,
        },
        "v2v_sigma": 0.1,
        "init_error_scale": 1.0,
    },
    "comm_range": 150.0,
    "outages": [],
    "traffic": {
        "queue_gap": 2.0,
        "decel": 2.0,
        "max_decel": 3.0,
        "accel": 1.5,
        "start_delay": 2.0,
        "vehicle_length": 4.6,
        "v_stop": 0.3,
        "d_gate": 6.0,
        "stop_sigma": 0.0,
    },
    "filter": {
        "init_att_sigma_deg": [0.1, 0.1, 1.0],
        "init_vel_sigma": 0.1,
        "init_pos_sigma": [3.0, 3.0, 3.0],
        "gnss_pos_sigma": None,
        "gnss_vel_sigma": None,
        "v2v_sigma": None,
        "gyro_arw_deg_rt_h": None,
        "accel_vrw_m_s_rt_h": None,
        "gate_alpha": 0.001,
        "gate_v2v": True,
        "staleness": 0.25,
        "d_min": 0.5,
        "range_decimation": True,
    },
}

VEHICLE_DEFAULTS = {"cruise_speed": 8.0, "name": None, "gnss": {}}
METHODS = ("sp", "sl-sp", "cp", "sl-cp")
SIGNAL_GROUPS = ("ns", "ew")


@dataclass(frozen=True)
class Route:
    waypoints: np.ndarray
    turn_radius: float
    entries: tuple[str, ...]


@dataclass(frozen=True)
class VehicleConfig:
    id: int
    name: str
    route: Route
    cruise_speed: float
    gnss: dict


@dataclass(frozen=True)
class LightGroup:
    initial: str
    durations: tuple[float, ...]


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    duration: float
    origin: GeodeticPosition
    entries: tuple[StopLineMapEntry, ...]
    light: dict
    vehicles: tuple[VehicleConfig, ...]
    rates: dict
    noise: dict
    comm_range: float
    outages: tuple[dict, ...]
    traffic: dict
    filter: dict
    raw: dict

    def entry(self, entry_id: str) -> StopLineMapEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    def vehicle_gnss(self, vid: int) -> dict:
        base = copy.deepcopy(self.noise["gnss"])
        for v in self.vehicles:
            if v.id == vid:
                base.update(v.gnss)
        return base

    def with_seed(self, seed: int) -> "ScenarioConfig":
        if isinstance(seed, bool) or int(seed) != seed or seed < 0:
            raise ConfigError("expected a non-negative integer", "seed")
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return replace(self, seed=int(seed), raw=raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def ticks_per(self, rate_key: str) -> int:
        return int(round(self.rates["imu"] / self.rates[rate_key]))

    def offset_ticks(self, rate_key: str) -> int:
        return int(round(self.rates[f"{rate_key}_offset"] * self.rates["imu"]))

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration * self.rates["imu"]))


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError("unknown field", f"{where}.{k}" if where else k)
        if isinstance(base[k], dict) and base[k] and k not in ("light_schedule",):
            if not isinstance(v, dict):
                raise ConfigError("expected an object", f"{where}.{k}" if where else k)
            out[k] = _merge(base[k], v, f"{where}.{k}" if where else k)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _pos(val, where: str, allow_zero: bool = False) -> float:
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ConfigError(f"expected a finite number, got {val!r}", where)
    if val < 0 or (val == 0 and not allow_zero):
        raise ConfigError(f"must be {'non-negative' if allow_zero else 'positive'}, got {val!r}", where)
    return float(val)


def _num(val, where: str) -> float:
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ConfigError(f"expected a finite number, got {val!r}", where)
    return float(val)


def _sigma3(val, where: str, allow_zero: bool = True) -> list[float]:
    if isinstance(val, (list, tuple)):
        if len(val) != 3:
            raise ConfigError("expected 3 values", where)
        return [_pos(v, f"{where}[{i}]", allow_zero) for i, v in enumerate(val)]
    return [_pos(val, where, allow_zero)] * 3


def _parse_vehicle(raw, i: int, entry_ids: set[str]) -> VehicleConfig:
    where = f"vehicles[{i}]"
    if not isinstance(raw, dict):
        raise ConfigError("expected an object", where)
    allowed = {"id", "name", "route", "cruise_speed", "gnss"}
    for k in raw:
        if k not in allowed:
            raise ConfigError("unknown field", f"{where}.{k}")
    if "id" not in raw or isinstance(raw["id"], bool) or not isinstance(raw["id"], int) or raw["id"] < 0:
        raise ConfigError("expected a non-negative integer id", f"{where}.id")
    route = raw.get("route")
    if not isinstance(route, dict):
        raise ConfigError("expected an object", f"{where}.route")
    wps = route.get("waypoints")
    if not isinstance(wps, list) or len(wps) < 2:
        raise ConfigError("expected at least two [north, east] points", f"{where}.route.waypoints")
    pts = []
    for j, p in enumerate(wps):
        if not isinstance(p, (list, tuple)) or len(p) != 2:
            raise ConfigError("expected [north, east]", f"{where}.route.waypoints[{j}]")
        pts.append([_num(p[0], f"{where}.route.waypoints[{j}][0]"), _num(p[1], f"{where}.route.waypoints[{j}][1]")])
    pts = np.array(pts)
    if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) < 1e-6):
        raise ConfigError("consecutive waypoints coincide", f"{where}.route.waypoints")
    radius = _pos(route.get("turn_radius", 10.0), f"{where}.route.turn_radius")
    entries = route.get("entries", [])
    if not isinstance(entries, list):
        raise ConfigError("expected a list of map entry ids", f"{where}.route.entries")
    for j, e in enumerate(entries):
        if e not in entry_ids:
            raise ConfigError(f"unknown map entry {e!r}", f"{where}.route.entries[{j}]")
    cruise = _pos(raw.get("cruise_speed", VEHICLE_DEFAULTS["cruise_speed"]), f"{where}.cruise_speed")
    gnss = raw.get("gnss", {})
    if not isinstance(gnss, dict):
        raise ConfigError("expected an object", f"{where}.gnss")
    for k in gnss:
        if k not in DEFAULTS["noise"]["gnss"]:
            raise ConfigError("unknown field", f"{where}.gnss.{k}")
    return VehicleConfig(
        id=raw["id"],
        name=str(raw.get("name") or f"V{raw['id']}"),
        route=Route(pts, radius, tuple(entries)),
        cruise_speed=cruise,
        gnss=copy.deepcopy(gnss),
    )


def _parse_light(raw, where: str = "light_schedule") -> dict:
    if not isinstance(raw, dict) or not raw:
        raise ConfigError("expected an object keyed by signal group", where)
    groups = {}
    for g, spec in raw.items():
        if g not in SIGNAL_GROUPS:
            raise ConfigError(f"unknown signal group (use {SIGNAL_GROUPS})", f"{where}.{g}")
        if not isinstance(spec, dict):
            raise ConfigError("expected an object", f"{where}.{g}")
        initial = spec.get("initial", "red")
        if initial not in ("red", "green"):
            raise ConfigError("expected 'red' or 'green'", f"{where}.{g}.initial")
        durs = spec.get("durations")
        if not isinstance(durs, list) or not durs:
            raise ConfigError("expected a non-empty list of phase durations", f"{where}.{g}.durations")
        groups[g] = LightGroup(initial, tuple(_pos(d, f"{where}.{g}.durations[{i}]") for i, d in enumerate(durs)))
    if "ns" in groups and "ew" not in groups:
        ns = groups["ns"]
        groups["ew"] = LightGroup("green" if ns.initial == "red" else "red", ns.durations)
    elif "ew" in groups and "ns" not in groups:
        ew = groups["ew"]
        groups["ns"] = LightGroup("green" if ew.initial == "red" else "red", ew.durations)
    return groups


def parse_config(doc: dict, base_dir: Path | None = None) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object")
    raw = copy.deepcopy(doc)
    vehicles_raw = raw.pop("vehicles", None)
    map_raw = raw.pop("map", None)
    map_file = raw.pop("map_file", None)
    cfg = _merge(DEFAULTS, raw, "")

    seed = cfg["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("expected a non-negative integer", "seed")
    duration = _pos(cfg["duration"], "duration")
    o = cfg["origin"]
    try:
        origin = GeodeticPosition.from_degrees(_num(o["lat_deg"], "origin.lat_deg"), _num(o["lon_deg"], "origin.lon_deg"),
                                               _num(o["height"], "origin.height"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), "origin") from None

    if map_raw is not None and map_file is not None:
        raise ConfigError("give either map or map_file, not both", "map")
    if map_file is not None:
        path = Path(map_file)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"map file not found: {path}", "map_file")
        entries = load_map(path)
    elif map_raw is not None:
        entries = parse_map(map_raw, "map")
    else:
        entries = []
    entry_ids = {e.id for e in entries}

    rates = cfg["rates"]
    for k in ("imu", "gnss", "beacon", "range"):
        _pos(rates[k], f"rates.{k}")
    for k in ("gnss", "beacon", "range"):
        ratio = rates["imu"] / rates[k]
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("IMU rate must be an integer multiple of this rate", f"rates.{k}")
    for k in ("gnss_offset", "beacon_offset"):
        off = _pos(rates[k], f"rates.{k}", allow_zero=True)
        ticks = off * rates["imu"]
        if abs(ticks - round(ticks)) > 1e-9:
            raise ConfigError("offset must fall on the IMU sample grid", f"rates.{k}")
    if rates["imu"] < 10.0:
        raise ConfigError("IMU rate must be at least 10 Hz", "rates.imu")
    cov_ratio = rates["imu"] / 10.0
    if abs(cov_ratio - round(cov_ratio)) > 1e-9:
        raise ConfigError("IMU rate must be a multiple of 10 Hz", "rates.imu")

    noise = cfg["noise"]
    g = noise["gnss"]
    for k in ("pos_sigma", "vel_sigma", "bias_sigma"):
        _sigma3(g[k], f"noise.gnss.{k}")
    _pos(g["bias_tau"], "noise.gnss.bias_tau")
    if not isinstance(g["bias"], list) or len(g["bias"]) != 3:
        raise ConfigError("expected 3 values", "noise.gnss.bias")
    for i, b in enumerate(g["bias"]):
        _num(b, f"noise.gnss.bias[{i}]")
    for k, v in noise["imu"].items():
        _pos(v, f"noise.imu.{k}", allow_zero=True)
    _pos(noise["v2v_sigma"], "noise.v2v_sigma", allow_zero=True)
    _pos(noise["init_error_scale"], "noise.init_error_scale", allow_zero=True)

    comm_range = _pos(cfg["comm_range"], "comm_range")
    outages = cfg["outages"]
    if not isinstance(outages, list):
        raise ConfigError("expected a list", "outages")
    for i, out in enumerate(outages):
        if not isinstance(out, dict) or set(out) - {"a", "b", "start", "end"} or not {"start", "end"} <= set(out):
            raise ConfigError("expected {a, b, start, end}", f"outages[{i}]")
        if _num(out["end"], f"outages[{i}].end") < _num(out["start"], f"outages[{i}].start"):
            raise ConfigError("end before start", f"outages[{i}]")

    for k, v in cfg["traffic"].items():
        _pos(v, f"traffic.{k}", allow_zero=(k == "stop_sigma"))

    filt = cfg["filter"]
    _sigma3(filt["init_att_sigma_deg"], "filter.init_att_sigma_deg", allow_zero=False)
    _pos(filt["init_vel_sigma"], "filter.init_vel_sigma")
    _sigma3(filt["init_pos_sigma"], "filter.init_pos_sigma", allow_zero=False)
    for k in ("gnss_pos_sigma", "gnss_vel_sigma", "v2v_sigma"):
        if filt[k] is not None:
            _sigma3(filt[k], f"filter.{k}", allow_zero=False)
    for k in ("gyro_arw_deg_rt_h", "accel_vrw_m_s_rt_h"):
        if filt[k] is not None:
            _pos(filt[k], f"filter.{k}", allow_zero=True)
    alpha = _num(filt["gate_alpha"], "filter.gate_alpha")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError("must be in (0, 1]", "filter.gate_alpha")
    _pos(filt["staleness"], "filter.staleness")
    _pos(filt["d_min"], "filter.d_min")

    light = _parse_light(cfg["light_schedule"])

    if not isinstance(vehicles_raw, list) or not vehicles_raw:
        raise ConfigError("expected a non-empty list", "vehicles")
    vehicles = tuple(_parse_vehicle(v, i, entry_ids) for i, v in enumerate(vehicles_raw))
    ids = [v.id for v in vehicles]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate vehicle ids", "vehicles")
    for v in vehicles:
        gnss = copy.deepcopy(g)
        gnss.update(v.gnss)
        for k in ("pos_sigma", "vel_sigma", "bias_sigma"):
            _sigma3(gnss[k], f"vehicles[{ids.index(v.id)}].gnss.{k}")

    stored = copy.deepcopy(doc)
    return ScenarioConfig(
        name=str(cfg["name"]),
        seed=seed,
        duration=duration,
        origin=origin,
        entries=tuple(entries),
        light=light,
        vehicles=vehicles,
        rates=rates,
        noise=noise,
        comm_range=comm_range,
        outages=tuple(outages),
        traffic=cfg["traffic"],
        filter=filt,
        raw=stored,
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", f"{path}:{exc.lineno}:{exc.colno}") from None
    return parse_config(doc, path.parent)


def builtin_names() -> list[str]:
    files = resources.files("cinav.scenarios").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".json"))


def builtin_doc(name: str) -> dict:
    try:
        text = resources.files("cinav.scenarios").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise KeyError(f"no built-in scenario {name!r}; available: {builtin_names()}") from None
    return json.loads(text)


def builtin(name: str, **overrides) -> ScenarioConfig:
    """Load a packaged scenario, optionally overriding top-level fields."""
    doc = builtin_doc(name)
    doc.update(copy.deepcopy(overrides))
    return parse_config(doc)
