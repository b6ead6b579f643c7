"""Deterministic intersection simulator."""

from .config import METHODS, ScenarioConfig, builtin, load_config, parse_config
from .runner import Phase, ScenarioResult, Trace, run_scenario
from .sensors import BeaconSlot, SensorStreams, synthesize_sensors
from .traffic import Path, SpeedProfile, TrafficLight, TrafficLightState, TruthTrajectory, generate_truth, plan_vehicles

__all__ = [
    "METHODS", "BeaconSlot", "Path", "Phase", "ScenarioConfig", "ScenarioResult", "SensorStreams", "SpeedProfile",
    "Trace", "TrafficLight", "TrafficLightState", "TruthTrajectory", "builtin", "generate_truth", "load_config",
    "parse_config", "plan_vehicles", "run_scenario", "synthesize_sensors",
]
