"""Deterministic in-process network of scripted peers."""
from .profiles import PROFILES, BehaviorProfile, profile_by_name
from .scenario import BUNDLED, AssertionFailure, ScenarioConfig, load_scenario, run_scenario

__all__ = ["PROFILES", "BehaviorProfile", "profile_by_name", "BUNDLED", "AssertionFailure",
           "ScenarioConfig", "load_scenario", "run_scenario"]
