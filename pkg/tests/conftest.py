"""Shared fixtures: small model configs, canned token scenes, tiny worlds."""
from __future__ import annotations

import numpy as np
import pytest

from plantkit.geom import ObjectToken, TokenKind
from plantkit.model import PlanTConfig, init_params
from plantkit.sim.world import (
    Lane,
    LaneGraph,
    Route,
    Signal,
    TrafficLight,
    VehicleState,
    WorldState,
)


@pytest.fixture
def tiny_cfg() -> PlanTConfig:
    return PlanTConfig(hidden=16, heads=2, layers=2)


@pytest.fixture
def tiny_tokens() -> list[ObjectToken]:
    return [
        ObjectToken(TokenKind.VEHICLE, 3.0, 8.0, 1.0, 0.1, 2.0, 4.5, "v1"),
        ObjectToken(TokenKind.VEHICLE, 0.0, 14.0, -2.5, 6.1, 2.0, 4.5, "v2"),
        ObjectToken(TokenKind.VEHICLE, 5.5, -6.0, 3.0, 0.0, 2.0, 4.5, "v3"),
        ObjectToken(TokenKind.ROUTE_SEGMENT, 0.0, 4.0, 0.0, 0.0, 3.5, 8.0, None),
        ObjectToken(TokenKind.ROUTE_SEGMENT, 1.0, 12.0, 0.3, 0.05, 3.5, 8.0, None),
    ]


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, np.random.default_rng(7))


def straight_world(
    vehicles=(),
    length: float = 200.0,
    signal_s: float | None = None,
    light: TrafficLight | None = None,
) -> WorldState:
    """One straight east-west lane with an ego at s=10 plus extra vehicles.

    ``vehicles`` holds (id, s, speed, policy, script) tuples placed on the
    same lane. An optional signal at ``signal_s`` is tied to ``light``.
    """
    lane = Lane("main", [[-50.0, 0.0], [length - 50.0, 0.0]])
    signals = []
    lights = []
    if signal_s is not None:
        light = light or TrafficLight("L0", green_s=5.0, red_s=1000.0)
        signals.append(Signal("main", signal_s, light.id))
        lights.append(light)
    graph = LaneGraph(lanes={"main": lane}, signals=signals)
    route = Route(graph, ["main"])

    def place(vid, s, speed, policy, script):
        return VehicleState(
            id=vid, route=route, s=s, speed=speed, pose=route.pose_at(s),
            policy=policy, script=dict(script or {}),
        )

    fleet = [place("ego", 10.0, 0.0, "ego", None)]
    for vid, s, speed, policy, script in vehicles:
        fleet.append(place(vid, s, speed, policy, script))
    return WorldState(graph, fleet, lights)
