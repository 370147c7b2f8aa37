"""Procedural scenario construction.

Four road archetypes, each parameterized and seeded so a scenario spec
rebuilds byte-for-byte:

* ``straight``: single lane, optional lead traffic, sudden-brake events,
  parked roadside decoys, and minor-road crossers.
* ``crossing``: signalized perpendicular intersection with anti-phased
  lights, queued cross traffic, and optional red-light jumpers.
* ``merge``: side lane joining a main road; merging traffic may ignore
  the main flow, so yielding decisions depend on vehicles beside or
  behind the ego.
* ``twolane``: a blocked lane forcing a lane change, with optional fast
  traffic approaching from behind in the target lane.

The sharpest hazard is the staged standing start: a crosser waits
beside the road, then darts across timed to an unimpeded ego arrival.
Only a planner that anticipates motion from a stopped vehicle (via
scripts, or a learned cue) slows early enough; extrapolating current
speeds first flags the crosser after the braking distance is spent.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..geom import InvalidInputError, Pose2
from .world import (
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
    VehicleState,
    WorldState,
    detect_collisions,
)

EGO_ID = "ego"


@dataclass
class ScenarioSpec:
    """Serializable recipe for one closed-loop episode."""

    name: str
    archetype: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "archetype": self.archetype,
            "seed": self.seed,
            "params": dict(self.params),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ScenarioSpec":
        return cls(
            name=data["name"],
            archetype=data["archetype"],
            seed=int(data.get("seed", 0)),
            params=dict(data.get("params", {})),
        )


@dataclass
class Scenario:
    spec: ScenarioSpec
    world: WorldState
    ego_id: str
    target_speed: float


def build_scenario(spec: ScenarioSpec) -> Scenario:
    try:
        builder = _ARCHETYPES[spec.archetype]
    except KeyError:
        raise InvalidInputError(
            f"unknown archetype {spec.archetype!r}; expected one of {sorted(_ARCHETYPES)}"
        ) from None
    rng = np.random.default_rng(spec.seed)
    world, target_speed = builder(rng, dict(spec.params))
    world.rng_seed = spec.seed
    colliding = detect_collisions(world)
    if colliding:
        raise ScenarioError(f"scenario {spec.name!r} spawns overlapping vehicles: {colliding}")
    if world.vehicle(EGO_ID) is None:
        raise ScenarioError(f"scenario {spec.name!r} has no ego vehicle")
    return Scenario(spec=spec, world=world, ego_id=EGO_ID, target_speed=target_speed)


def scenario_to_json_str(spec: ScenarioSpec) -> str:
    return json.dumps(spec.to_json(), sort_keys=True)


# -- shared pieces ----------------------------------------------------------


def _line(p0, p1) -> np.ndarray:
    return np.array([p0, p1], dtype=np.float64)


def _ego(route: Route, s: float, speed: float) -> VehicleState:
    return VehicleState(
        id=EGO_ID,
        route=route,
        s=s,
        speed=speed,
        pose=route.pose_at(s),
        policy=POLICY_EGO,
    )


def _background(
    vid: str,
    route: Route,
    s: float,
    speed: float,
    v0: float | None = None,
    script: dict | None = None,
) -> VehicleState:
    idm = IdmParams(v0=v0) if v0 is not None else IdmParams()
    vehicle = VehicleState(
        id=vid,
        route=route,
        s=s,
        speed=speed,
        pose=route.pose_at(s),
        policy=POLICY_SCRIPTED if script is not None else POLICY_IDM,
        idm=idm,
        script=script or {},
    )
    return vehicle


def _parked_row(
    graph_lanes: dict,
    count: int,
    along,  # callable s -> (x, y, yaw) for the parking strip
    spacing: float,
    start_s: float,
    prefix: str,
) -> list[VehicleState]:
    """Stationary decoy vehicles on their own stub lanes beside the road."""
    decoys = []
    for k in range(count):
        s = start_s + k * spacing
        x, y, yaw = along(s)
        lane_id = f"{prefix}{k}"
        pts = np.array(
            [
                [x - 3.0 * math.cos(yaw), y - 3.0 * math.sin(yaw)],
                [x + 3.0 * math.cos(yaw), y + 3.0 * math.sin(yaw)],
            ]
        )
        lane = Lane(lane_id, pts, width=2.5)
        graph_lanes[lane_id] = lane
        route = Route(LaneGraph(lanes={lane_id: lane}), [lane_id])
        decoys.append(
            _background(lane_id, route, 3.0, 0.0, script={"kind": "constant"})
        )
    return decoys


def _time_to_distance(dist: float, v0: float, vmax: float, accel: float = 3.0) -> float:
    """Travel time for accelerate-then-cruise, used to stage conflicts."""
    t_acc = max(vmax - v0, 0.0) / accel
    d_acc = v0 * t_acc + 0.5 * accel * t_acc * t_acc
    if d_acc >= dist:
        return (-v0 + math.sqrt(v0 * v0 + 2.0 * accel * dist)) / accel
    return t_acc + (dist - d_acc) / vmax


# speed controller settles slightly above the setpoint; arrival staging
# uses the measured closed-loop cruise speeds so conflicts land on time
_CLOSED_LOOP_CRUISE = {5.0: 5.02, 6.0: 6.08}
# launch this long before the staged ego arrival at the conflict zone
_LAUNCH_LEAD = 0.5
# extra arrival delay after an earlier staged collision on the same route
_POST_HIT_DELAY = 2.15


def _staged_eta(dist: float, v0: float, target: float) -> float:
    """Ego travel time to a conflict point under closed-loop control."""
    cruise = _CLOSED_LOOP_CRUISE.get(target, 1.01 * target)
    return _time_to_distance(dist, v0, cruise)


def _launch_script(eta: float, rng: np.random.Generator) -> dict:
    """Launch script staged against the unimpeded ego arrival ``eta``.

    The crosser starts 8 m short of the conflict point and darts at
    5 m/s**2, reaching the travel lane about 1.4 s after its trigger.
    Triggering just before the staged arrival means a planner reacting
    only to current speeds is already inside its braking distance when
    the motion becomes forecastable, while anticipating planners slow
    well clear.
    """
    trigger = eta - _LAUNCH_LEAD + rng.uniform(-0.1, 0.1)
    return {
        "kind": "launch",
        "trigger_tick": max(int(round(trigger / 0.1)), 1),
        "accel": 5.0,
        "top_speed": 6.5,
    }


def _launch_cross(
    lanes: dict,
    vid: str,
    x_cross: float,
    y_zone: float,
    eta: float,
    rng: np.random.Generator,
) -> VehicleState:
    """Stopped crosser on a minor road, primed to dart over the main one."""
    lane_id = f"{vid}_path"
    lane = Lane(lane_id, _line((x_cross, y_zone - 40.0), (x_cross, y_zone + 40.0)))
    lanes[lane_id] = lane
    route = Route(LaneGraph(lanes={lane_id: lane}), [lane_id])
    return _background(vid, route, 32.0, 0.0, script=_launch_script(eta, rng))


# -- archetypes -------------------------------------------------------------


def _build_straight(rng: np.random.Generator, params: dict):
    length = float(params.get("length", 240.0))
    target = float(params.get("target_speed", 6.0))
    n_lead = int(params.get("n_lead", 1))
    sudden = bool(params.get("sudden_brake", False))
    decoys = int(params.get("decoys", 0))
    cross_at = [float(x) for x in params.get("cross_at", ())]

    lanes = {"main": Lane("main", _line((-20.0, 0.0), (length - 20.0, 0.0)))}
    vehicles: list[VehicleState] = []

    graph = LaneGraph(lanes=lanes)
    main_route = Route(graph, ["main"])
    ego_x0, ego_v0 = -5.0, 0.5 * target
    vehicles.append(_ego(main_route, 15.0, ego_v0))

    gap = 25.0 + rng.uniform(0.0, 15.0)
    s = 15.0 + gap
    for k in range(n_lead):
        if sudden and k == 0:
            trigger = int(rng.integers(40, 90))
            vehicles.append(
                _background(
                    f"lead{k}",
                    main_route,
                    s,
                    6.0,
                    script={
                        "kind": "sudden_brake", "trigger_tick": trigger,
                        "rate": 5.0, "hold_ticks": 60, "resume_speed": 6.0,
                    },
                )
            )
        else:
            vehicles.append(
                _background(f"lead{k}", main_route, s, 4.0, v0=float(rng.uniform(4.0, 6.5)))
            )
        s += 20.0 + rng.uniform(0.0, 10.0)

    for k, x_c in enumerate(cross_at):
        eta = _staged_eta(x_c - 3.75 - ego_x0, ego_v0, target) + k * _POST_HIT_DELAY
        vehicles.append(_launch_cross(lanes, f"jumper{k}", x_c, 0.0, eta, rng))

    if decoys:
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        start = 25.0 + rng.uniform(0.0, 10.0)
        vehicles.extend(
            _parked_row(
                lanes,
                decoys,
                lambda s_: (s_ - 20.0, side * 5.5, 0.0),
                spacing=9.0,
                start_s=start,
                prefix="parked",
            )
        )
    graph = LaneGraph(lanes=lanes)
    world = WorldState(graph, vehicles, lights=[], dt=0.1)
    return world, target


def _build_crossing(rng: np.random.Generator, params: dict):
    target = float(params.get("target_speed", 6.0))
    n_queue = int(params.get("n_queue", 3))
    arrivals = int(params.get("arrivals", 0))
    runner = bool(params.get("runner", False))
    launcher = bool(params.get("launcher", False))
    cross2 = params.get("cross2")
    decoys = int(params.get("decoys", 0))
    green_s = float(params.get("green_s", 40.0))
    red_s = float(params.get("red_s", 15.0))

    # two-way cross street; the ego light stays green long enough to
    # cover an unimpeded transit, so conflicts come from the cross lanes
    lanes = {
        "ego_ew": Lane("ego_ew", _line((-80.0, 0.0), (120.0, 0.0))),
        "cross_nb": Lane("cross_nb", _line((0.0, -130.0), (0.0, 100.0))),
        "cross_sb": Lane("cross_sb", _line((3.5, 100.0), (3.5, -90.0))),
    }
    # stop lines several meters before each lane's conflict point
    signals = [
        Signal(lane_id="ego_ew", s=74.0, light_id="L_ego"),
        Signal(lane_id="cross_nb", s=121.25, light_id="L_cross"),
        Signal(lane_id="cross_sb", s=93.0, light_id="L_cross"),
    ]
    # the cross light is green exactly while the ego light is red
    lights = [
        TrafficLight("L_ego", green_s=green_s, red_s=red_s, offset=0.0),
        TrafficLight("L_cross", green_s=red_s, red_s=green_s, offset=red_s),
    ]
    graph = LaneGraph(lanes=lanes, signals=signals)
    ego_route = Route(graph, ["ego_ew"])
    nb_route = Route(graph, ["cross_nb"])
    sb_route = Route(graph, ["cross_sb"])

    ego_v0 = 0.5 * target
    vehicles = [_ego(ego_route, 10.0, ego_v0)]  # x = -70

    # southbound queue already settled at its red light, clear of the road
    s = 88.75
    for _k in range(n_queue):
        vehicles.append(
            _background(f"queued{_k}", sb_route, s, 0.0, v0=float(rng.uniform(5.0, 7.0)))
        )
        s -= 6.5

    # northbound traffic braking toward its own red light; rests 13 m
    # south of the road, well apart from any primed jumper at y = -8
    s = 105.0 - 15.0 * rng.uniform(0.9, 1.1)
    for _k in range(arrivals):
        vehicles.append(
            _background(f"arrival{_k}", nb_route, s, 5.5, v0=float(rng.uniform(5.0, 6.0)))
        )
        s -= 15.0 + rng.uniform(0.0, 6.0)

    if runner:
        # same approach lane and position band as the arrivals, but holds
        # 9 m/s through the red; staged to meet an unimpeded ego
        eta = _staged_eta(70.0, ego_v0, target)
        speed = 9.0
        start = 130.0 - speed * (eta + rng.uniform(-0.2, 0.2))
        vehicles.append(
            _background("runner", nb_route, start, speed, script={"kind": "constant"})
        )

    if launcher:
        # standing start on the northbound lane itself, crept just past
        # its stop line, primed to jump the red as the ego arrives
        eta = _staged_eta(-3.75 - (-70.0), ego_v0, target)
        vehicles.append(
            _background("jumper0", nb_route, 122.0, 0.0, script=_launch_script(eta, rng))
        )
    if cross2 is not None:
        x_c = float(cross2)
        eta = _staged_eta(x_c - 3.75 - (-70.0), ego_v0, target)
        if launcher:
            eta += _POST_HIT_DELAY
        vehicles.append(_launch_cross(lanes, "jumper1", x_c, 0.0, eta, rng))

    if decoys:
        vehicles.extend(
            _parked_row(
                lanes,
                decoys,
                lambda s_: (s_ - 60.0, -5.5, 0.0),
                spacing=9.0,
                start_s=rng.uniform(30.0, 38.0),
                prefix="parked",
            )
        )
    graph = LaneGraph(lanes=lanes, signals=signals)
    world = WorldState(graph, vehicles, lights=lights, dt=0.1)
    return world, target


def _lane_s_at_x(lane: Lane, x: float) -> float:
    best_s, best_err = 0.0, float("inf")
    for cand in np.linspace(0.0, lane.length, 400):
        err = abs(lane.pose_at(float(cand)).x - x)
        if err < best_err:
            best_err, best_s = err, float(cand)
    return best_s


def _build_merge(rng: np.random.Generator, params: dict):
    target = float(params.get("target_speed", 5.0))
    adversary = bool(params.get("adversary", True))
    adv_speed = float(params.get("adv_speed", 8.0))
    lead = bool(params.get("lead", False))
    cross_at = [float(x) for x in params.get("cross_at", ())]

    main_pts = _line((-100.0, 0.0), (160.0, 0.0))
    side_pts = np.array(
        [[-70.0, 25.0], [-30.0, 12.0], [-5.0, 1.5], [10.0, 0.0], [14.0, 0.0]]
    )
    lanes = {
        "main": Lane("main", main_pts),
        "side": Lane("side", side_pts),
        "main_tail": Lane("main_tail", _line((14.0, 0.0), (160.0, 0.0))),
    }
    graph = LaneGraph(lanes=lanes, successors={"side": ["main_tail"]})
    ego_route = Route(graph, ["main"])
    merge_route = Route(graph, ["side", "main_tail"])

    ego_s = 55.0  # x = -45
    ego_v0 = 0.8 * target
    vehicles = [_ego(ego_route, ego_s, ego_v0)]
    if adversary:
        # stage the merger to enter the convergence zone just after the ego
        # would, so an ego that never yields takes a side impact
        zone_x = -5.0
        s_zone = _lane_s_at_x(lanes["side"], zone_x)
        t_ego = _time_to_distance(zone_x - (-45.0), ego_v0, target)
        dt_conflict = float(params.get("conflict_dt", 0.3 + rng.uniform(-0.15, 0.15)))
        s0 = max(s_zone - adv_speed * (t_ego + dt_conflict), 0.5)
        vehicles.append(
            _background("merger", merge_route, s0, adv_speed, script={"kind": "constant"})
        )
    if lead:
        vehicles.append(
            _background("lead0", ego_route, ego_s + 35.0, 4.0, v0=float(rng.uniform(4.0, 6.0)))
        )
    for k, x_c in enumerate(cross_at):
        eta = _staged_eta(x_c - 3.75 - (-45.0), ego_v0, target) + k * _POST_HIT_DELAY
        vehicles.append(_launch_cross(lanes, f"jumper{k}", x_c, 0.0, eta, rng))
    graph = LaneGraph(lanes=lanes, successors={"side": ["main_tail"]})
    world = WorldState(graph, vehicles, lights=[], dt=0.1)
    return world, target


def _build_twolane(rng: np.random.Generator, params: dict):
    target = float(params.get("target_speed", 5.0))
    adversary = bool(params.get("adversary", True))
    adv_speed = float(params.get("adv_speed", 9.0))
    shift_at = float(params.get("shift_at", 40.0))  # x where the change starts

    # right lane at y=0, left lane at y=3.5; blocker forces a left change
    right = Lane("right", _line((-60.0, 0.0), (200.0, 0.0)))
    left = Lane("left", _line((-60.0, 3.5), (200.0, 3.5)))
    shift_pts = np.array(
        [
            [-60.0, 0.0],
            [shift_at, 0.0],
            [shift_at + 10.0, 0.9],
            [shift_at + 20.0, 2.6],
            [shift_at + 30.0, 3.5],
            [200.0, 3.5],
        ]
    )
    ego_path = Lane("ego_path", shift_pts)
    lanes = {"right": right, "left": left, "ego_path": ego_path}
    graph = LaneGraph(lanes=lanes)
    ego_route = Route(graph, ["ego_path"])
    right_route = Route(graph, ["right"])
    left_route = Route(graph, ["left"])

    ego_x = 25.0
    ego_v0 = 0.8 * target
    vehicles = [_ego(ego_route, 60.0 + ego_x, ego_v0)]
    blocker_s = 60.0 + shift_at + 45.0  # world x = shift_at + 45, in the right lane
    vehicles.append(
        _background("blocker", right_route, blocker_s, 0.0, script={"kind": "constant"})
    )
    if adversary:
        # stage the rear car to own the left lane while the ego crosses into it
        exposure_x = shift_at + 15.0
        t_ego = _time_to_distance(exposure_x - ego_x, ego_v0, target)
        dt_conflict = float(params.get("conflict_dt", rng.uniform(-0.3, 0.3)))
        adv_x = exposure_x - adv_speed * (t_ego + dt_conflict)
        adv_s = max(60.0 + adv_x, 0.5)
        vehicles.append(
            _background("rear", left_route, adv_s, adv_speed, script={"kind": "constant"})
        )
    for k, x_c in enumerate(params.get("cross_at", ())):
        # crossers sit below the right lane and sweep over both lanes
        x_c = float(x_c)
        s_entry = _lane_s_at_x(ego_path, x_c - 3.75)
        eta = _staged_eta(s_entry - (60.0 + ego_x), ego_v0, target) + k * _POST_HIT_DELAY
        vehicles.append(_launch_cross(lanes, f"jumper{k}", x_c, 3.5, eta, rng))
    graph = LaneGraph(lanes=lanes)
    world = WorldState(graph, vehicles, lights=[], dt=0.1)
    return world, target


_ARCHETYPES = {
    "straight": _build_straight,
    "crossing": _build_crossing,
    "merge": _build_merge,
    "twolane": _build_twolane,
}

ARCHETYPE_NAMES = tuple(sorted(_ARCHETYPES))
