"""Closed-loop 2D driving simulator with procedural scenarios."""
from .maps import (
    ARCHETYPE_NAMES,
    EGO_ID,
    Scenario,
    ScenarioSpec,
    build_scenario,
)
from .world import (
    Controls,
    IdmParams,
    Lane,
    LaneGraph,
    POLICY_EGO,
    POLICY_IDM,
    POLICY_SCRIPTED,
    Route,
    ScenarioError,
    Signal,
    TrafficLight,
    VehicleParams,
    VehicleState,
    WorldState,
    detect_collisions,
    idm_acceleration,
    idm_policy,
    leader_constraint,
    red_light_gap,
    route_progress,
    step_world,
)

__all__ = [
    "ARCHETYPE_NAMES",
    "EGO_ID",
    "Controls",
    "IdmParams",
    "Lane",
    "LaneGraph",
    "POLICY_EGO",
    "POLICY_IDM",
    "POLICY_SCRIPTED",
    "Route",
    "Scenario",
    "ScenarioError",
    "ScenarioSpec",
    "Signal",
    "TrafficLight",
    "VehicleParams",
    "VehicleState",
    "WorldState",
    "build_scenario",
    "detect_collisions",
    "idm_acceleration",
    "idm_policy",
    "leader_constraint",
    "red_light_gap",
    "route_progress",
    "step_world",
]
