"""Deterministic 2D closed-loop traffic world.

Lane-graph roads, kinematic vehicles, IDM background traffic, traffic
lights, oriented-box collision detection, and route progress. The ego
vehicle integrates the kinematic bicycle model from normalized controls;
background vehicles advance along their lane centerlines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geom import InvalidInputError, OrientedBox, Pose2, boxes_overlap, norm_angle


class ScenarioError(RuntimeError):
    """Raised when a scenario cannot be instantiated (e.g. occupied spawn)."""


@dataclass
class Controls:
    """Normalized actuation: steer in [-1, 1], throttle in [0, 1], brake 0/1."""

    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def saturated(self) -> "Controls":
        return Controls(
            steer=min(1.0, max(-1.0, self.steer)),
            throttle=min(1.0, max(0.0, self.throttle)),
            brake=1.0 if self.brake >= 0.5 else 0.0,
        )


@dataclass
class VehicleParams:
    """Shared kinematic limits (desk-scale stand-in for real dynamics)."""

    wheelbase: float = 2.5
    max_speed: float = 15.0
    max_accel: float = 3.0
    max_brake: float = 6.0
    max_steer: float = 0.9  # radians of wheel angle at |steer| = 1


@dataclass
class IdmParams:
    v0: float = 6.0
    headway: float = 1.5
    accel: float = 2.0
    decel: float = 2.5
    min_gap: float = 2.0
    exponent: float = 4.0


def idm_acceleration(
    speed: float, params: IdmParams, gap: float | None, closing_speed: float
) -> float:
    """Intelligent Driver Model acceleration.

    Args:
        speed: follower speed (m/s).
        params: IDM parameter set.
        gap: bumper gap to the constraint ahead in meters, None for free road.
        closing_speed: follower speed minus leader speed.
    """
    free = params.accel * (1.0 - (speed / params.v0) ** params.exponent)
    if gap is None:
        return free
    gap = max(gap, 0.1)
    desired = params.min_gap + speed * params.headway + speed * closing_speed / (
        2.0 * math.sqrt(params.accel * params.decel)
    )
    return params.accel * (
        1.0 - (speed / params.v0) ** params.exponent - (desired / gap) ** 2
    )


class Lane:
    """A centerline polyline resampled to ~1 m with arc-length lookup."""

    def __init__(self, lane_id: str, points, width: float = 3.5, spacing: float = 1.0):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise InvalidInputError(f"lane {lane_id}: need at least two points")
        self.id = lane_id
        self.width = width
        self.points = _resample(pts, spacing)
        deltas = np.diff(self.points, axis=0)
        seg_lens = np.hypot(deltas[:, 0], deltas[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(seg_lens)])
        self.length = float(self.cum[-1])
        self._yaws = np.arctan2(deltas[:, 1], deltas[:, 0])

    def pose_at(self, s: float) -> Pose2:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self._yaws) - 1)
        seg_len = self.cum[i + 1] - self.cum[i]
        frac = 0.0 if seg_len == 0 else (s - self.cum[i]) / seg_len
        p = self.points[i] * (1.0 - frac) + self.points[i + 1] * frac
        return Pose2(float(p[0]), float(p[1]), float(self._yaws[i]))

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Return (arc position, unsigned lateral distance) of the nearest point."""
        p = np.array([x, y])
        a = self.points[:-1]
        b = self.points[1:]
        ab = b - a
        denom = np.einsum("ij,ij->i", ab, ab)
        denom[denom == 0] = 1.0
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / denom, 0.0, 1.0)
        closest = a + ab * t[:, None]
        d2 = np.einsum("ij,ij->i", closest - p, closest - p)
        i = int(np.argmin(d2))
        s = float(self.cum[i] + t[i] * (self.cum[i + 1] - self.cum[i]))
        return s, float(math.sqrt(d2[i]))


def _resample(pts: np.ndarray, spacing: float) -> np.ndarray:
    deltas = np.diff(pts, axis=0)
    seg = np.hypot(deltas[:, 0], deltas[:, 1])
    keep = seg > 1e-9
    if not np.all(keep):
        pts = np.concatenate([pts[:1], pts[1:][keep]])
        deltas = np.diff(pts, axis=0)
        seg = np.hypot(deltas[:, 0], deltas[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    n = max(int(math.ceil(total / spacing)), 1)
    targets = np.linspace(0.0, total, n + 1)
    out = np.empty((n + 1, 2))
    for k, s in enumerate(targets):
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        i = max(i, 0)
        frac = 0.0 if seg[i] == 0 else (s - cum[i]) / seg[i]
        out[k] = pts[i] * (1.0 - frac) + pts[i + 1] * frac
    return out


@dataclass
class Signal:
    lane_id: str
    s: float
    light_id: str


@dataclass
class LaneGraph:
    lanes: dict[str, Lane]
    successors: dict[str, list[str]] = field(default_factory=dict)
    signals: list[Signal] = field(default_factory=list)

    def __post_init__(self):
        for src, dsts in self.successors.items():
            for dst in [src] + dsts:
                if dst not in self.lanes:
                    raise InvalidInputError(f"successor map references unknown lane {dst!r}")


class Route:
    """A connected lane sequence with a single arc-length coordinate."""

    def __init__(self, graph: LaneGraph, lane_ids: list[str]):
        if not lane_ids:
            raise InvalidInputError("route needs at least one lane")
        self.lane_ids = list(lane_ids)
        self.lanes = [graph.lanes[i] for i in lane_ids]
        offsets = [0.0]
        for lane in self.lanes[:-1]:
            offsets.append(offsets[-1] + lane.length)
        self.offsets = offsets
        self.length = offsets[-1] + self.lanes[-1].length
        self.lane_width = self.lanes[0].width
        self._offset_by_id = {i: off for i, off in zip(self.lane_ids, offsets)}
        self._signals = [
            (self._offset_by_id[sig.lane_id] + sig.s, sig.light_id)
            for sig in graph.signals
            if sig.lane_id in self._offset_by_id
        ]
        self._signals.sort()

    def pose_at(self, s: float) -> Pose2:
        s = min(max(s, 0.0), self.length)
        for lane, off in zip(reversed(self.lanes), reversed(self.offsets)):
            if s >= off:
                return lane.pose_at(s - off)
        return self.lanes[0].pose_at(s)

    def locate(self, s: float) -> tuple[str, float]:
        """Map a route arc position to (lane_id, arc within lane)."""
        s = min(max(s, 0.0), self.length)
        for lane_id, lane, off in zip(
            reversed(self.lane_ids), reversed(self.lanes), reversed(self.offsets)
        ):
            if s >= off:
                return lane_id, s - off
        return self.lane_ids[0], s

    def arc_of_lane_point(self, lane_id: str, s_in_lane: float) -> float | None:
        off = self._offset_by_id.get(lane_id)
        if off is None:
            return None
        return off + s_in_lane

    def project(self, x: float, y: float, s_hint: float, window: float = 25.0) -> float:
        """Arc position of the nearest route point, searched near ``s_hint``."""
        best_s, best_d = s_hint, float("inf")
        for lane_id, lane, off in zip(self.lane_ids, self.lanes, self.offsets):
            if off + lane.length < s_hint - window or off > s_hint + window:
                continue
            s, d = lane.project(x, y)
            if d < best_d:
                best_d, best_s = d, off + s
        return best_s

    def lateral_distance(self, x: float, y: float, s: float) -> float:
        pose = self.pose_at(s)
        return math.hypot(x - pose.x, y - pose.y)

    def points_between(self, s0: float, s1: float, spacing: float = 1.0) -> np.ndarray:
        s0 = min(max(s0, 0.0), self.length)
        s1 = min(max(s1, s0), self.length)
        if s1 - s0 < spacing:
            s1 = min(self.length, s0 + spacing)
        n = max(int(math.ceil((s1 - s0) / spacing)), 1)
        samples = np.linspace(s0, s1, n + 1)
        pts = np.empty((len(samples), 2))
        for i, s in enumerate(samples):
            pose = self.pose_at(s)
            pts[i] = (pose.x, pose.y)
        return pts

    def signals_ahead(self, s: float, max_dist: float, slack: float = 2.0):
        """(arc position, light id) pairs within [s - slack, s + max_dist]."""
        return [
            (sig_s, light_id)
            for sig_s, light_id in self._signals
            if s - slack <= sig_s <= s + max_dist
        ]


@dataclass
class TrafficLight:
    id: str
    green_s: float = 12.0
    red_s: float = 10.0
    offset: float = 0.0
    clock: float = 0.0

    @property
    def phase(self) -> str:
        period = self.green_s + self.red_s
        local = (self.clock + self.offset) % period
        return "green" if local < self.green_s else "red"

    def copy(self) -> "TrafficLight":
        return TrafficLight(self.id, self.green_s, self.red_s, self.offset, self.clock)


POLICY_EGO = "ego"
POLICY_IDM = "idm"
POLICY_SCRIPTED = "scripted"


@dataclass
class VehicleState:
    id: str
    route: Route
    s: float
    speed: float
    pose: Pose2
    width: float = 2.0
    length: float = 4.5
    policy: str = POLICY_IDM
    idm: IdmParams = field(default_factory=IdmParams)
    script: dict = field(default_factory=dict)

    def box(self) -> OrientedBox:
        return OrientedBox(self.pose, self.width, self.length)

    def copy(self) -> "VehicleState":
        return VehicleState(
            self.id,
            self.route,
            self.s,
            self.speed,
            self.pose,
            self.width,
            self.length,
            self.policy,
            self.idm,
            dict(self.script),
        )


class WorldState:
    """Full privileged simulator state; advanced only by :func:`step_world`."""

    def __init__(
        self,
        graph: LaneGraph,
        vehicles: list[VehicleState],
        lights: list[TrafficLight],
        dt: float = 0.1,
        rng_seed: int = 0,
    ):
        ids = [v.id for v in vehicles]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("vehicle ids must be unique")
        self.graph = graph
        self.vehicles = vehicles
        self.lights = {light.id: light for light in lights}
        self.dt = dt
        self.tick = 0
        self.rng_seed = rng_seed

    def vehicle(self, vehicle_id: str) -> VehicleState | None:
        for vehicle in self.vehicles:
            if vehicle.id == vehicle_id:
                return vehicle
        return None

    def copy(self) -> "WorldState":
        clone = WorldState(
            self.graph,
            [v.copy() for v in self.vehicles],
            [light.copy() for light in self.lights.values()],
            dt=self.dt,
            rng_seed=self.rng_seed,
        )
        clone.tick = self.tick
        return clone

    # -- queries used by the tokenizer and planners -------------------------

    def route_points_ahead(self, ego_id: str, max_dist: float, spacing: float = 1.0):
        ego = self.vehicle(ego_id)
        return ego.route.points_between(ego.s, ego.s + max_dist, spacing)

    def route_lane_width(self, ego_id: str) -> float:
        return self.vehicle(ego_id).route.lane_width

    def next_signal_on_route(self, ego_id: str, max_dist: float) -> TrafficLight | None:
        ego = self.vehicle(ego_id)
        ahead = ego.route.signals_ahead(ego.s, max_dist)
        if not ahead:
            return None
        _, light_id = ahead[0]
        return self.lights[light_id]

    def serialize(self) -> dict:
        """Deterministic plain-data snapshot (used by determinism checks)."""
        return {
            "tick": self.tick,
            "dt": self.dt,
            "rng_seed": self.rng_seed,
            "vehicles": [
                {
                    "id": v.id,
                    "s": v.s,
                    "speed": v.speed,
                    "pose": [v.pose.x, v.pose.y, v.pose.yaw],
                    "extent": [v.width, v.length],
                    "policy": v.policy,
                    "lanes": v.route.lane_ids,
                }
                for v in self.vehicles
            ],
            "lights": [
                {
                    "id": light.id,
                    "clock": light.clock,
                    "phase": light.phase,
                    "cycle": [light.green_s, light.red_s],
                    "offset": light.offset,
                }
                for light in self.lights.values()
            ],
        }


# -- stepping ---------------------------------------------------------------

_LEADER_LOOKAHEAD = 60.0


def _scripted_accel(vehicle: VehicleState, tick: int, dt: float) -> float:
    script = vehicle.script
    kind = script.get("kind", "constant")
    if kind == "constant":
        return 0.0
    if kind == "sudden_brake":
        # brake hard, sit stopped for hold_ticks, then pull away again
        trigger = script.get("trigger_tick", 0)
        if tick < trigger:
            return 0.0
        hold_until = trigger + script.get("hold_ticks", 60)
        if tick < hold_until:
            return -script.get("rate", 5.0)
        resume = script.get("resume_speed", 5.0)
        return 2.0 if vehicle.speed < resume else 0.0
    if kind == "launch":
        # wait stopped, then dart forward (red-light jumper)
        if tick < script.get("trigger_tick", 0):
            return -5.0
        top = script.get("top_speed", 6.0)
        return script.get("accel", 3.0) if vehicle.speed < top else 0.0
    raise InvalidInputError(f"unknown scripted policy {kind!r}")


def _project_on_route(route: Route, x: float, y: float, s_lo: float, s_hi: float):
    """Nearest route point to (x, y) with arc in [s_lo, s_hi].

    Returns (lateral distance, arc) or None when no lane overlaps the window.
    """
    best: tuple[float, float] | None = None
    for lane, off in zip(route.lanes, route.offsets):
        if off + lane.length < s_lo or off > s_hi:
            continue
        s, d = lane.project(x, y)
        arc = off + s
        if arc < s_lo or arc > s_hi:
            continue
        if best is None or d < best[0]:
            best = (d, arc)
    return best


def leader_constraint(
    world: WorldState, follower: VehicleState
) -> tuple[float, float] | None:
    """Nearest blocking vehicle ahead on the follower's route.

    Returns (bumper gap, leader speed) or None. Blocking is geometric: the
    other vehicle's position must project onto the follower's route within
    0.6 lane widths of the centerline, so vehicles mid-merge or on their
    own connector lanes still register.
    """
    best: tuple[float, float] | None = None
    for other in world.vehicles:
        if other.id == follower.id:
            continue
        if (
            math.hypot(other.pose.x - follower.pose.x, other.pose.y - follower.pose.y)
            > _LEADER_LOOKAHEAD + other.length
        ):
            continue
        hit = _project_on_route(
            follower.route, other.pose.x, other.pose.y, follower.s, follower.s + _LEADER_LOOKAHEAD
        )
        if hit is None:
            continue
        lateral, arc = hit
        if lateral > 0.6 * follower.route.lane_width:
            continue
        gap = arc - follower.s - 0.5 * (other.length + follower.length)
        if gap <= 0.0:
            continue
        if best is None or gap < best[0]:
            best = (gap, other.speed)
    return best


def red_light_gap(world: WorldState, vehicle: VehicleState) -> float | None:
    """Distance to the stop line of the next red light on the route."""
    for sig_s, light_id in vehicle.route.signals_ahead(vehicle.s, _LEADER_LOOKAHEAD, slack=0.0):
        light = world.lights[light_id]
        if light.phase == "red":
            gap = sig_s - vehicle.s - 0.5 * vehicle.length
            if gap > 0.0:
                return gap
            return None
        return None
    return None


def idm_policy(
    follower: VehicleState,
    leader: VehicleState | None,
    light_gap: float | None,
    route_gap: float | None = None,
) -> float:
    """IDM acceleration against an optional leader and red-light stop line.

    ``route_gap`` is the precomputed bumper gap to the leader along the
    follower's route; when omitted it is derived from arc positions
    (valid only when both share the same route object).
    """
    gap = None
    closing = 0.0
    if leader is not None:
        if route_gap is None:
            route_gap = leader.s - follower.s - 0.5 * (leader.length + follower.length)
        gap, closing = route_gap, follower.speed - leader.speed
    if light_gap is not None and (gap is None or light_gap < gap):
        gap, closing = light_gap, follower.speed
    return idm_acceleration(follower.speed, follower.idm, gap, closing)


def _background_accel(world: WorldState, vehicle: VehicleState) -> float:
    if vehicle.policy == POLICY_SCRIPTED:
        return _scripted_accel(vehicle, world.tick, world.dt)
    constraint = leader_constraint(world, vehicle)
    light_gap = red_light_gap(world, vehicle)
    gap, closing = (None, 0.0)
    if constraint is not None:
        gap, closing = constraint[0], vehicle.speed - constraint[1]
    if light_gap is not None and (gap is None or light_gap < gap):
        gap, closing = light_gap, vehicle.speed
    return idm_acceleration(vehicle.speed, vehicle.idm, gap, closing)


def _advance_ego(vehicle: VehicleState, controls: Controls, params: VehicleParams, dt: float):
    controls = controls.saturated()
    accel = controls.throttle * params.max_accel - controls.brake * params.max_brake
    speed = min(max(vehicle.speed + accel * dt, 0.0), params.max_speed)
    steer = controls.steer * params.max_steer
    curvature = math.tan(steer) / params.wheelbase
    x, y, yaw = vehicle.pose.x, vehicle.pose.y, vehicle.pose.yaw
    dist = speed * dt
    if abs(curvature) < 1e-9:
        x += dist * math.cos(yaw)
        y += dist * math.sin(yaw)
    else:
        # exact constant-curvature arc over the tick
        new_yaw = yaw + dist * curvature
        x += (math.sin(new_yaw) - math.sin(yaw)) / curvature
        y += (math.cos(yaw) - math.cos(new_yaw)) / curvature
        yaw = new_yaw
    vehicle.speed = speed
    vehicle.pose = Pose2(x, y, norm_angle(yaw))
    projected = vehicle.route.project(x, y, vehicle.s)
    vehicle.s = max(vehicle.s, projected)


def step_world(
    world: WorldState,
    ego_controls: Controls | None = None,
    params: VehicleParams | None = None,
    skip_ego: bool = False,
) -> WorldState:
    """Advance the world one tick in place (and return it).

    Accelerations are computed from the pre-step state for every vehicle,
    so the update is synchronous and independent of vehicle order.
    ``skip_ego`` freezes ego-policy vehicles (used by forecasting).
    """
    params = params or VehicleParams()
    dt = world.dt
    accels: dict[str, float] = {}
    for vehicle in world.vehicles:
        if vehicle.policy == POLICY_EGO:
            continue
        accels[vehicle.id] = _background_accel(world, vehicle)

    finished: list[str] = []
    for vehicle in world.vehicles:
        if vehicle.policy == POLICY_EGO:
            if not skip_ego:
                _advance_ego(vehicle, ego_controls or Controls(), params, dt)
            continue
        accel = accels[vehicle.id]
        vehicle.speed = min(max(vehicle.speed + accel * dt, 0.0), params.max_speed)
        vehicle.s += vehicle.speed * dt
        if vehicle.s >= vehicle.route.length - 0.5:
            finished.append(vehicle.id)
            continue
        vehicle.pose = vehicle.route.pose_at(vehicle.s)

    if finished:
        world.vehicles = [v for v in world.vehicles if v.id not in finished]
    for light in world.lights.values():
        light.clock += dt
    world.tick += 1
    return world


# -- collision detection and route progress ---------------------------------


def detect_collisions(world: WorldState) -> list[tuple[str, str]]:
    """All unordered vehicle pairs whose oriented boxes overlap."""
    pairs = []
    vehicles = world.vehicles
    for i in range(len(vehicles)):
        for j in range(i + 1, len(vehicles)):
            if boxes_overlap(vehicles[i].box(), vehicles[j].box()):
                a, b = sorted((vehicles[i].id, vehicles[j].id))
                pairs.append((a, b))
    pairs.sort()
    return pairs


def route_progress(ego: VehicleState) -> float:
    """Fraction of the route arc length completed, in [0, 1]."""
    if ego.route.length <= 0:
        return 0.0
    return min(max(ego.s / ego.route.length, 0.0), 1.0)
