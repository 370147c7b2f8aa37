"""Privileged expert driver, constant-speed baseline forecast, and PID control.

The expert sees the true simulator state. Each tick it forecasts every
other vehicle forward K steps, checks those swept boxes against its own
route-following hypothesis, and either cruises or brakes to zero. The
same decision rule driven by a constant-speed forecast is the rule-based
baseline. Waypoint plans from either source (or from a learned planner)
are turned into actuation by a pair of PID controllers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import OrientedBox, boxes_overlap, points_to_ego_frame
from .sim.world import (
    POLICY_EGO,
    WorldState,
    Controls,
    red_light_gap,
    step_world,
)


@dataclass
class ExpertConfig:
    cruise_speed: float = 6.0
    horizon: int = 20          # forecast ticks (2 s at dt = 0.1)
    inflation: float = 0.5     # safety margin added around other vehicles, meters
    n_waypoints: int = 4
    dt_wp: float = 0.1
    light_lookahead: float = 30.0
    max_brake: float = 6.0

    def stop_threshold(self) -> float:
        # constant (speed-independent) so the stopped state is stable
        return self.cruise_speed**2 / (2.0 * self.max_brake) + 0.3 * self.cruise_speed + 1.0


@dataclass
class WaypointPlan:
    """W ordered (x, y) points in the current ego frame."""

    waypoints: np.ndarray

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ValueError(f"waypoints must be (W, 2), got {self.waypoints.shape}")
        if not np.isfinite(self.waypoints[0]).all():
            raise ValueError("first waypoint must be finite")


@dataclass
class ForecastSet:
    """Future oriented boxes per vehicle; entry 0 is the current pose.

    Entries are None after a vehicle leaves the map partway through the
    horizon, so every list still has ``horizon`` + 1 slots.
    """

    horizon: int
    boxes: dict[str, list[OrientedBox | None]]


def forecast_privileged(world: WorldState, horizon: int) -> ForecastSet:
    """Unroll every background vehicle's actual policy on a copied world.

    The ego is held frozen as a static obstacle, so the result is the
    exact future under the assumption the ego does not move.
    """
    clone = world.copy()
    boxes: dict[str, list[OrientedBox | None]] = {
        v.id: [v.box()] for v in clone.vehicles if v.policy != POLICY_EGO
    }
    for _ in range(horizon):
        step_world(clone, skip_ego=True)
        present = {v.id: v for v in clone.vehicles}
        for vid, seq in boxes.items():
            vehicle = present.get(vid)
            seq.append(vehicle.box() if vehicle is not None else None)
    return ForecastSet(horizon=horizon, boxes=boxes)


def forecast_constant_speed(world: WorldState, horizon: int) -> ForecastSet:
    """Extrapolate each vehicle along its route at its current speed."""
    boxes: dict[str, list[OrientedBox | None]] = {}
    for v in world.vehicles:
        if v.policy == POLICY_EGO:
            continue
        seq: list[OrientedBox | None] = [v.box()]
        for k in range(1, horizon + 1):
            s = v.s + v.speed * k * world.dt
            pose = v.route.pose_at(s)  # clamps at route end
            seq.append(OrientedBox(pose, v.width, v.length))
        boxes[v.id] = seq
    return ForecastSet(horizon=horizon, boxes=boxes)


def _ego_hypothesis_boxes(world: WorldState, ego_id: str, cfg: ExpertConfig):
    """Ego boxes along its route at cruise speed, time-aligned with forecasts.

    Cruise speed (not current speed) keeps the check conservative while
    the ego is slowing down and makes the decision rule stateless.
    """
    ego = world.vehicle(ego_id)
    out = []
    for k in range(cfg.horizon + 1):
        pose = ego.route.pose_at(ego.s + cfg.cruise_speed * k * world.dt)
        out.append(OrientedBox(pose, ego.width, ego.length))
    return out


def expert_decide(
    world: WorldState,
    ego_id: str,
    forecast: ForecastSet,
    visible: set[str] | None = None,
    cfg: ExpertConfig | None = None,
) -> tuple[float, WaypointPlan]:
    """Cruise unless a forecast intersection or a close red light demands a stop.

    ``visible`` restricts which vehicles' forecasts the expert may react
    to; None means all of them. Shrinking the set can only raise the
    returned target speed.
    """
    cfg = cfg or ExpertConfig()
    ego = world.vehicle(ego_id)
    target = cfg.cruise_speed

    light_gap = red_light_gap(world, ego)
    if light_gap is not None and light_gap <= cfg.light_lookahead:
        if light_gap <= cfg.stop_threshold():
            target = 0.0

    if target > 0.0:
        ids = sorted(forecast.boxes) if visible is None else sorted(visible)
        ego_boxes = _ego_hypothesis_boxes(world, ego_id, cfg)
        hit = False
        for vid in ids:
            seq = forecast.boxes.get(vid)
            if seq is None or vid == ego_id:
                continue
            for k, ego_box in enumerate(ego_boxes):
                other = seq[k] if k < len(seq) else None
                if other is None:
                    continue
                if boxes_overlap(ego_box, other.inflated(cfg.inflation)):
                    hit = True
                    break
            if hit:
                break
        if hit:
            target = 0.0

    targets = np.array(
        [
            (pose.x, pose.y)
            for pose in (
                ego.route.pose_at(ego.s + target * cfg.dt_wp * i)
                for i in range(1, cfg.n_waypoints + 1)
            )
        ]
    )
    return target, WaypointPlan(points_to_ego_frame(ego.pose, targets))


@dataclass
class PidConfig:
    lat_kp: float = 1.2
    lat_ki: float = 0.0
    lat_kd: float = 0.2
    lon_kp: float = 1.0
    lon_ki: float = 0.05
    lon_kd: float = 0.0
    dt: float = 0.1
    dt_wp: float = 0.1
    min_speed: float = 0.4     # desired below this means "stop"
    overshoot: float = 1.2     # brake when current speed exceeds this factor
    integral_limit: float = 5.0


class PidController:
    """Stateful lateral + longitudinal controllers for one episode."""

    def __init__(self, cfg: PidConfig | None = None):
        self.cfg = cfg or PidConfig()
        self.reset()

    def reset(self):
        self._lat_prev = 0.0
        self._lat_int = 0.0
        self._lon_int = 0.0

    def pid_control(self, plan: WaypointPlan, current_speed: float) -> Controls:
        cfg = self.cfg
        wps = plan.waypoints
        aim = 0.5 * (wps[0] + wps[1]) if len(wps) >= 2 else wps[0]
        if math.hypot(aim[0], aim[1]) < 0.05:
            heading_err = 0.0
        else:
            heading_err = math.atan2(aim[1], aim[0])
        self._lat_int = _clamp(self._lat_int + heading_err * cfg.dt, cfg.integral_limit)
        deriv = (heading_err - self._lat_prev) / cfg.dt
        self._lat_prev = heading_err
        steer = cfg.lat_kp * heading_err + cfg.lat_ki * self._lat_int + cfg.lat_kd * deriv

        desired = float(np.linalg.norm(wps[1] - wps[0])) / cfg.dt_wp if len(wps) >= 2 else 0.0
        if desired < cfg.min_speed or current_speed > cfg.overshoot * desired:
            self._lon_int = 0.0
            return Controls(steer=steer, throttle=0.0, brake=1.0).saturated()
        err = desired - current_speed
        self._lon_int = _clamp(self._lon_int + err * cfg.dt, cfg.integral_limit)
        throttle = cfg.lon_kp * err + cfg.lon_ki * self._lon_int
        return Controls(steer=steer, throttle=throttle, brake=0.0).saturated()


def _clamp(value: float, limit: float) -> float:
    return min(max(value, -limit), limit)


def pid_control(
    plan: WaypointPlan, current_speed: float, controller: PidController | None = None
) -> Controls:
    """One-shot wrapper; pass a controller to keep integral state."""
    controller = controller or PidController()
    return controller.pid_control(plan, current_speed)
