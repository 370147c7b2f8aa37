"""Expert planner, forecasting, and PID controller tests."""
from __future__ import annotations

import math

import numpy as np
import pytest

from plantkit.geom import Pose2
from plantkit.pilot import (
    ExpertConfig,
    ForecastSet,
    PidConfig,
    PidController,
    WaypointPlan,
    expert_decide,
    forecast_constant_speed,
    forecast_privileged,
    pid_control,
)
from plantkit.sim.world import Controls, TrafficLight, step_world

from conftest import straight_world


# -- plans ------------------------------------------------------------------


def test_waypoint_plan_validates_shape():
    WaypointPlan(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        WaypointPlan(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        WaypointPlan(np.zeros(8))
    with pytest.raises(ValueError):
        WaypointPlan(np.array([[np.nan, 0.0], [1.0, 0.0]]))


# -- forecasting ------------------------------------------------------------


def test_constant_speed_forecast_matches_manual_extrapolation():
    world = straight_world(vehicles=[("bg", 40.0, 5.0, "idm", None)])
    fc = forecast_constant_speed(world, horizon=10)
    assert set(fc.boxes) == {"bg"}
    seq = fc.boxes["bg"]
    assert len(seq) == 11
    bg = world.vehicle("bg")
    for k, box in enumerate(seq):
        expect = bg.route.pose_at(40.0 + 5.0 * k * 0.1)
        assert box.center.x == pytest.approx(expect.x)
        assert box.center.y == pytest.approx(expect.y)


def test_constant_speed_forecast_keeps_stopped_vehicles_in_place():
    world = straight_world(vehicles=[("bg", 40.0, 0.0, "idm", None)])
    seq = forecast_constant_speed(world, horizon=8).boxes["bg"]
    xs = {box.center.x for box in seq}
    assert len(xs) == 1


def test_privileged_forecast_matches_actual_rollout():
    def build():
        return straight_world(
            vehicles=[
                ("bg", 40.0, 5.0, "idm", None),
                ("lead", 60.0, 2.0, "scripted", {"kind": "constant"}),
            ]
        )

    world = build()
    fc = forecast_privileged(world, horizon=15)
    # forecasting must not mutate the source world
    assert world.tick == 0
    assert world.vehicle("bg").s == pytest.approx(40.0)

    replay = build()
    for k in range(1, 16):
        step_world(replay, skip_ego=True)
        for vid in ("bg", "lead"):
            box = fc.boxes[vid][k]
            actual = replay.vehicle(vid)
            assert box.center.x == pytest.approx(actual.pose.x, abs=1e-12)
            assert box.center.y == pytest.approx(actual.pose.y, abs=1e-12)


def test_privileged_forecast_diverges_from_constant_speed_on_reaction():
    # the IDM follower brakes for its stopped leader; the constant-speed
    # forecast keeps it sailing forward
    world = straight_world(
        vehicles=[
            ("bg", 40.0, 6.0, "idm", None),
            ("wall", 55.0, 0.0, "scripted", {"kind": "constant"}),
        ]
    )
    horizon = 20
    priv = forecast_privileged(world, horizon).boxes["bg"][-1]
    const = forecast_constant_speed(world, horizon).boxes["bg"][-1]
    assert const.center.x - priv.center.x > 1.0


def test_privileged_forecast_marks_departed_vehicles_none():
    world = straight_world(
        vehicles=[("bg", 195.0, 6.0, "scripted", {"kind": "constant"})], length=200.0
    )
    seq = forecast_privileged(world, horizon=20).boxes["bg"]
    assert seq[0] is not None
    assert seq[-1] is None
    assert len(seq) == 21


def test_privileged_forecast_launch_script_sees_the_dart():
    # the launch script is tied to the world tick, so the privileged
    # forecast reveals the jump before any speed is observable
    script = {"kind": "launch", "trigger_tick": 5, "accel": 5.0, "top_speed": 6.5}
    world = straight_world(vehicles=[("jmp", 40.0, 0.0, "scripted", script)])
    priv = forecast_privileged(world, horizon=20).boxes["jmp"]
    const = forecast_constant_speed(world, horizon=20).boxes["jmp"]
    assert priv[-1].center.x - priv[0].center.x > 3.0
    assert const[-1].center.x == pytest.approx(const[0].center.x)


# -- expert decisions -------------------------------------------------------


def test_expert_cruises_on_empty_road():
    world = straight_world()
    fc = forecast_privileged(world, ExpertConfig().horizon)
    target, plan = expert_decide(world, "ego", fc)
    assert target == pytest.approx(6.0)
    # straight route: waypoints march down +x at cruise spacing
    assert plan.waypoints[:, 0] == pytest.approx(
        [0.6, 1.2, 1.8, 2.4], abs=1e-6
    )
    assert plan.waypoints[:, 1] == pytest.approx([0.0] * 4, abs=1e-9)


def test_expert_stops_for_blocking_vehicle():
    world = straight_world(
        vehicles=[("wall", 18.0, 0.0, "scripted", {"kind": "constant"})]
    )
    cfg = ExpertConfig()
    fc = forecast_privileged(world, cfg.horizon)
    target, plan = expert_decide(world, "ego", fc, cfg=cfg)
    assert target == 0.0
    assert np.allclose(plan.waypoints, 0.0, atol=1e-9)


def test_expert_ignores_vehicle_far_clear():
    world = straight_world(
        vehicles=[("far", 150.0, 0.0, "scripted", {"kind": "constant"})]
    )
    fc = forecast_privileged(world, ExpertConfig().horizon)
    target, _ = expert_decide(world, "ego", fc)
    assert target == pytest.approx(6.0)


def test_expert_visibility_restriction_is_monotone():
    # hiding the blocker can only raise the target speed
    world = straight_world(
        vehicles=[("wall", 18.0, 0.0, "scripted", {"kind": "constant"})]
    )
    cfg = ExpertConfig()
    fc = forecast_privileged(world, cfg.horizon)
    t_all, _ = expert_decide(world, "ego", fc, cfg=cfg)
    t_none, _ = expert_decide(world, "ego", fc, visible=set(), cfg=cfg)
    assert t_all == 0.0
    assert t_none == pytest.approx(cfg.cruise_speed)


def test_expert_stops_at_close_red_light():
    red = TrafficLight("L", green_s=5.0, red_s=1000.0, offset=5.0)
    world = straight_world(signal_s=14.0, light=red)  # gap well under threshold
    fc = forecast_privileged(world, ExpertConfig().horizon)
    target, _ = expert_decide(world, "ego", fc)
    assert target == 0.0


def test_expert_keeps_cruising_toward_distant_red_light():
    cfg = ExpertConfig()
    red = TrafficLight("L", green_s=5.0, red_s=1000.0, offset=5.0)
    gap = cfg.stop_threshold() + 8.0
    world = straight_world(signal_s=10.0 + 2.25 + gap, light=red)
    fc = forecast_privileged(world, cfg.horizon)
    target, _ = expert_decide(world, "ego", fc, cfg=cfg)
    assert target == pytest.approx(cfg.cruise_speed)


def test_expert_ignores_green_light():
    green = TrafficLight("L", green_s=1000.0, red_s=5.0)
    world = straight_world(signal_s=14.0, light=green)
    fc = forecast_privileged(world, ExpertConfig().horizon)
    target, _ = expert_decide(world, "ego", fc)
    assert target == pytest.approx(6.0)


def test_stop_threshold_formula():
    cfg = ExpertConfig(cruise_speed=6.0, max_brake=6.0)
    assert cfg.stop_threshold() == pytest.approx(36.0 / 12.0 + 1.8 + 1.0)


def test_expert_waypoints_follow_curved_route():
    world = straight_world()
    ego = world.vehicle("ego")
    ego.pose = Pose2(ego.pose.x, ego.pose.y, 0.5)  # yawed off the lane axis
    fc = forecast_privileged(world, ExpertConfig().horizon)
    _, plan = expert_decide(world, "ego", fc)
    # waypoints are expressed in the ego frame: the +x lane direction
    # shows up rotated by -yaw
    assert plan.waypoints[0][0] == pytest.approx(0.6 * math.cos(0.5), abs=1e-6)
    assert plan.waypoints[0][1] == pytest.approx(-0.6 * math.sin(0.5), abs=1e-6)


# -- PID --------------------------------------------------------------------


def _plan_for_speed(speed: float, dt_wp: float = 0.1) -> WaypointPlan:
    xs = np.arange(1, 5, dtype=np.float64) * speed * dt_wp
    return WaypointPlan(np.stack([xs, np.zeros(4)], axis=1))


def test_pid_straight_plan_gives_zero_steer():
    ctl = PidController()
    controls = ctl.pid_control(_plan_for_speed(6.0), current_speed=5.0)
    assert controls.steer == pytest.approx(0.0)
    assert controls.brake == 0.0
    assert controls.throttle > 0.0


def test_pid_brakes_when_plan_says_stop():
    ctl = PidController()
    controls = ctl.pid_control(_plan_for_speed(0.0), current_speed=5.0)
    assert controls.brake == 1.0
    assert controls.throttle == 0.0


def test_pid_brakes_on_overshoot():
    ctl = PidController()
    # desired 2 m/s but moving at 3 m/s > 1.2x desired
    controls = ctl.pid_control(_plan_for_speed(2.0), current_speed=3.0)
    assert controls.brake == 1.0


def test_pid_steers_toward_lateral_offset():
    plan = WaypointPlan(np.array([[1.0, 0.5], [2.0, 1.0], [3.0, 1.5], [4.0, 2.0]]))
    left = PidController().pid_control(plan, current_speed=3.0)
    assert left.steer > 0.0
    mirrored = WaypointPlan(plan.waypoints * np.array([1.0, -1.0]))
    right = PidController().pid_control(mirrored, current_speed=3.0)
    assert right.steer == pytest.approx(-left.steer)


def test_pid_integral_state_accumulates_and_resets():
    cfg = PidConfig(lon_ki=0.5)
    ctl = PidController(cfg)
    plan = _plan_for_speed(6.0)
    first = ctl.pid_control(plan, current_speed=2.0)
    second = ctl.pid_control(plan, current_speed=2.0)
    assert second.throttle >= first.throttle
    ctl.reset()
    again = ctl.pid_control(plan, current_speed=2.0)
    assert again.throttle == pytest.approx(first.throttle)


def test_pid_module_wrapper_stateless_default():
    plan = _plan_for_speed(6.0)
    a = pid_control(plan, 2.0)
    b = pid_control(plan, 2.0)
    assert a.throttle == pytest.approx(b.throttle)


def test_pid_closed_loop_settles_near_target_speed():
    world = straight_world()
    cfg = ExpertConfig()
    ctl = PidController()
    speeds = []
    for _ in range(120):
        fc = forecast_privileged(world, cfg.horizon)
        _, plan = expert_decide(world, "ego", fc, cfg=cfg)
        controls = ctl.pid_control(plan, world.vehicle("ego").speed)
        step_world(world, controls)
        speeds.append(world.vehicle("ego").speed)
    settled = speeds[-40:]
    assert np.mean(settled) == pytest.approx(cfg.cruise_speed, abs=0.25)
    assert np.std(settled) < 0.2


def test_pid_closed_loop_stops_before_wall():
    world = straight_world(
        vehicles=[("wall", 60.0, 0.0, "scripted", {"kind": "constant"})]
    )
    cfg = ExpertConfig()
    ctl = PidController()
    for _ in range(200):
        fc = forecast_privileged(world, cfg.horizon)
        _, plan = expert_decide(world, "ego", fc, cfg=cfg)
        controls = ctl.pid_control(plan, world.vehicle("ego").speed)
        step_world(world, controls)
    ego = world.vehicle("ego")
    wall = world.vehicle("wall")
    assert ego.speed == pytest.approx(0.0, abs=1e-6)
    # stopped short of the parked vehicle, no contact
    assert wall.s - ego.s > 4.5
