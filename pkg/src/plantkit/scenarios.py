"""Named scenario suites.

The starter suite is the fixed 12-route benchmark (3 routes per
archetype), each run at 3 seeds. The training suite uses disjoint
routes and seeds so evaluation never sees collection episodes.
"""
from __future__ import annotations

from .config import ConfigError
from .sim.maps import ScenarioSpec

STARTER_SEEDS = (101, 102, 103)
TRAINING_SEEDS = (11, 12)

_STARTER_ROUTES: list[tuple[str, str, dict]] = [
    ("straight-00", "straight", {"n_lead": 1}),
    ("straight-01", "straight", {"n_lead": 1, "sudden_brake": True, "decoys": 2}),
    ("straight-02", "straight", {"n_lead": 0, "cross_at": [80.0, 160.0], "decoys": 2}),
    ("crossing-00", "crossing", {"n_queue": 3, "launcher": True, "arrivals": 2, "decoys": 2}),
    ("crossing-01", "crossing", {"n_queue": 4, "launcher": True, "cross2": 60.0, "decoys": 3}),
    ("crossing-02", "crossing", {"n_queue": 2, "runner": True, "decoys": 2}),
    ("merge-00", "merge", {"adversary": True}),
    ("merge-01", "merge", {"adversary": True, "adv_speed": 9.0, "lead": True}),
    ("merge-02", "merge", {"adversary": False, "cross_at": [30.0, 90.0]}),
    ("twolane-00", "twolane", {"adversary": True}),
    ("twolane-01", "twolane", {"adversary": True, "adv_speed": 10.0}),
    ("twolane-02", "twolane", {"adversary": False, "cross_at": [115.0, 160.0]}),
]

_TRAINING_ROUTES: list[tuple[str, str, dict]] = [
    ("t-straight-00", "straight", {"n_lead": 1}),
    ("t-straight-01", "straight", {"n_lead": 1, "sudden_brake": True}),
    ("t-straight-02", "straight", {"n_lead": 2, "decoys": 2}),
    ("t-straight-03", "straight", {"n_lead": 0, "cross_at": [70.0], "decoys": 1}),
    ("t-straight-04", "straight", {"n_lead": 0, "cross_at": [90.0, 170.0]}),
    ("t-crossing-00", "crossing", {"n_queue": 3, "arrivals": 2, "decoys": 1}),
    ("t-crossing-01", "crossing", {"n_queue": 3, "launcher": True, "arrivals": 2, "decoys": 2}),
    ("t-crossing-02", "crossing", {"n_queue": 4, "launcher": True, "cross2": 60.0}),
    ("t-crossing-03", "crossing", {"n_queue": 2, "runner": True, "decoys": 2}),
    ("t-merge-00", "merge", {"adversary": True}),
    ("t-merge-01", "merge", {"adversary": True, "adv_speed": 9.0, "lead": True}),
    ("t-merge-02", "merge", {"adversary": False, "cross_at": [40.0, 100.0]}),
    ("t-twolane-00", "twolane", {"adversary": True, "adv_speed": 8.5}),
    ("t-twolane-01", "twolane", {"adversary": True, "adv_speed": 10.0}),
    ("t-twolane-02", "twolane", {"adversary": False, "cross_at": [120.0]}),
    ("t-twolane-03", "twolane", {"adversary": True, "conflict_dt": 0.5}),
]


def _expand(routes, seeds) -> list[ScenarioSpec]:
    specs = []
    for route_idx, (name, archetype, params) in enumerate(routes):
        for seed in seeds:
            specs.append(
                ScenarioSpec(
                    name=f"{name}-s{seed}",
                    archetype=archetype,
                    seed=seed * 1000 + route_idx,
                    params=dict(params),
                )
            )
    return specs


def starter_suite() -> list[ScenarioSpec]:
    return _expand(_STARTER_ROUTES, STARTER_SEEDS)


def training_suite() -> list[ScenarioSpec]:
    return _expand(_TRAINING_ROUTES, TRAINING_SEEDS)


def smoke_suite() -> list[ScenarioSpec]:
    """Two short episodes for fast pipeline checks."""
    return _expand(_STARTER_ROUTES[:1] + _STARTER_ROUTES[3:4], STARTER_SEEDS[:1])


def suite_by_name(name: str) -> list[ScenarioSpec]:
    suites = {
        "starter": starter_suite,
        "training": training_suite,
        "smoke": smoke_suite,
    }
    if name not in suites:
        raise ConfigError(f"unknown suite {name!r}; expected one of {sorted(suites)}")
    return suites[name]()
