"""Scoring, closed-loop episodes, relevance sources, and SVG rendering."""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from plantkit.eval import (
    AttentionSource,
    BenchmarkReport,
    EvalConfig,
    ExpertPlanner,
    InverseDistanceSource,
    PlanTPlanner,
    RfdsResult,
    RuleBasedPlanner,
    Trace,
    ablation_relevance,
    compute_driving_score,
    evaluate_suite,
    inverse_distance_relevance,
    render_scene_svg,
    rfds,
    run_route,
    summarize,
)
from plantkit.geom import FovConfig, ObjectToken, TokenKind, tokenize_scene
from plantkit.model import RelevanceRanking, forward_numpy
from plantkit.pilot import WaypointPlan
from plantkit.sim.maps import Scenario, ScenarioSpec, build_scenario
from plantkit.sim.world import TrafficLight

from conftest import straight_world


# -- driving score ----------------------------------------------------------


def _trace(events=(), progress=1.0, distance=500.0, error=None):
    return Trace(
        route="r", seed=0, ticks=100, progress=progress, distance_m=distance,
        status="ok", error=error, events=list(events),
    )


def test_score_clean_route():
    m = compute_driving_score(_trace(), EvalConfig())
    assert m.rc == 1.0
    assert m.is_ == 1.0
    assert m.ds == 1.0
    assert m.collisions_per_km == 0.0
    assert not m.cv_undefined


def test_score_collision_penalties_compound():
    cfg = EvalConfig()
    one = compute_driving_score(_trace([(5, "collision", "a")]), cfg)
    two = compute_driving_score(
        _trace([(5, "collision", "a"), (9, "collision", "b")]), cfg
    )
    assert one.is_ == pytest.approx(0.6)
    assert two.is_ == pytest.approx(0.36)
    assert two.ds == pytest.approx(two.rc * 0.36)


def test_score_red_light_penalty():
    cfg = EvalConfig()
    m = compute_driving_score(
        _trace([(5, "red_light", "L"), (9, "collision", "a")]), cfg
    )
    assert m.is_ == pytest.approx(0.6 * 0.7)


def test_score_is_one_when_no_infractions():
    m = compute_driving_score(_trace(progress=0.4), EvalConfig())
    assert m.is_ == 1.0
    assert m.ds == pytest.approx(0.4)


def test_score_planner_error_zeroes_rc():
    m = compute_driving_score(
        _trace(progress=0.7, error="RuntimeError('boom')"), EvalConfig()
    )
    assert m.rc == 0.0
    assert m.ds == 0.0
    assert m.error is not None


def test_score_ds_identity_random_traces():
    rng = np.random.default_rng(1)
    kinds = ["collision", "red_light", "deviation", "blocked"]
    for _ in range(200):
        events = [
            (int(rng.integers(0, 500)), kinds[int(rng.integers(0, 4))], "x")
            for _ in range(int(rng.integers(0, 6)))
        ]
        trace = _trace(
            events,
            progress=float(rng.uniform(0, 1)),
            distance=float(rng.uniform(0, 400)),
            error="err" if rng.uniform() < 0.2 else None,
        )
        m = compute_driving_score(trace, EvalConfig())
        assert m.ds == m.rc * m.is_  # exact float equality, not approx


def test_score_cv_per_km_and_undefined():
    cfg = EvalConfig()
    m = compute_driving_score(
        _trace([(1, "collision", "a"), (2, "collision", "b")], distance=250.0), cfg
    )
    assert m.collisions_per_km == pytest.approx(8.0)
    z = compute_driving_score(_trace(distance=0.0), cfg)
    assert z.cv_undefined
    assert z.collisions_per_km == 0.0


# -- closed-loop episodes ---------------------------------------------------


class StubPlanner:
    """Emits a fixed plan every tick (optionally raising)."""

    name = "stub"

    def __init__(self, waypoints, explode_at=None):
        self._wps = np.asarray(waypoints, dtype=np.float64)
        self._explode_at = explode_at
        self._calls = 0

    def reset(self, scenario):
        self._calls = 0

    def plan(self, world, ego_id):
        self._calls += 1
        if self._explode_at is not None and self._calls >= self._explode_at:
            raise RuntimeError("synthetic planner fault")
        return WaypointPlan(self._wps.copy())


def _cruise_plan(speed=6.0):
    xs = np.arange(1, 5) * speed * 0.1
    return np.stack([xs, np.zeros(4)], axis=1)


def _scenario_from_world(world, target_speed=6.0):
    spec = ScenarioSpec(name="synthetic", archetype="straight", seed=0)
    return Scenario(spec=spec, world=world, ego_id="ego", target_speed=target_speed)


def test_run_route_completes_clean():
    scenario = _scenario_from_world(straight_world(length=80.0))
    m, trace = run_route(ExpertPlanner(), scenario)
    assert trace.status == "ok"
    assert trace.events == []
    assert m.rc >= 0.995
    assert m.is_ == 1.0
    assert m.ds == m.rc
    assert trace.states, "states should be recorded for plotting"


def test_run_route_records_collision_once():
    world = straight_world(
        vehicles=[("wall", 60.0, 0.0, "scripted", {"kind": "constant"})]
    )
    scenario = _scenario_from_world(world)
    m, trace = run_route(StubPlanner(_cruise_plan()), scenario)
    hits = [e for e in trace.events if e[1] == "collision"]
    assert len(hits) == 1  # sustained contact is one event, not one per tick
    assert hits[0][2] == "wall"
    assert m.infractions["collision"] == 1
    assert m.is_ == pytest.approx(0.6)


def test_run_route_flags_red_light_crossing():
    red = TrafficLight("L", green_s=5.0, red_s=10000.0, offset=5.0)
    world = straight_world(signal_s=40.0, light=red, length=80.0)
    scenario = _scenario_from_world(world)
    m, trace = run_route(StubPlanner(_cruise_plan()), scenario)
    reds = [e for e in trace.events if e[1] == "red_light"]
    assert len(reds) == 1
    assert reds[0][2] == "L"
    assert m.is_ == pytest.approx(0.7)
    assert m.ds == m.rc * m.is_


def test_run_route_expert_waits_out_red_light():
    red_then_green = TrafficLight("L", green_s=100.0, red_s=6.0, offset=100.0)
    world = straight_world(signal_s=40.0, light=red_then_green, length=80.0)
    scenario = _scenario_from_world(world)
    m, trace = run_route(ExpertPlanner(), scenario)
    assert trace.status == "ok"
    assert all(e[1] != "red_light" for e in trace.events)
    assert m.is_ == 1.0


def test_run_route_blocked_terminates():
    scenario = _scenario_from_world(straight_world())
    cfg = EvalConfig(blocked_ticks=30)
    stop = np.zeros((4, 2))
    m, trace = run_route(StubPlanner(stop), scenario, cfg)
    assert trace.status == "blocked"
    assert trace.events[-1][1] == "blocked"
    assert m.distance_m == 0.0
    assert m.cv_undefined  # never moved


def test_run_route_deviation_terminates():
    scenario = _scenario_from_world(straight_world())
    # mild constant left bias: a tight circle would stay inside the
    # corridor, a wide arc walks out past the deviation threshold
    xs = np.arange(1, 5) * 0.6
    veer = np.stack([xs, 0.13 * xs], axis=1)
    m, trace = run_route(StubPlanner(veer), scenario, EvalConfig())
    assert trace.status == "deviation"
    assert trace.events[-1][1] == "deviation"


def test_run_route_planner_error_is_contained():
    scenario = _scenario_from_world(straight_world(length=80.0))
    m, trace = run_route(StubPlanner(_cruise_plan(), explode_at=20), scenario)
    assert trace.status == "planner-error"
    assert "synthetic planner fault" in trace.error
    assert m.rc == 0.0
    assert m.ds == 0.0


# -- aggregation ------------------------------------------------------------


def _metric(route, seed, ds, collisions=0, distance=1000.0):
    from plantkit.eval import RouteMetrics

    return RouteMetrics(
        route=route, seed=seed, rc=ds, is_=1.0, ds=ds,
        collisions_per_km=collisions / (distance / 1000.0),
        infractions={"collision": collisions, "red_light": 0,
                     "deviation": 0, "blocked": 0},
        status="ok", distance_m=distance,
    )


def test_summarize_seed_level_statistics():
    rows = [
        _metric("a", 1, 0.8), _metric("b", 1, 0.6),
        _metric("a", 2, 1.0), _metric("b", 2, 0.4),
    ]
    report = summarize("stub", rows)
    assert report.ds_mean == pytest.approx(0.7)
    # per-seed means are both 0.7, so the seed std collapses to zero
    assert report.ds_std == pytest.approx(0.0)
    uneven = summarize("stub", rows[:2] + [_metric("a", 2, 0.2), _metric("b", 2, 0.2)])
    assert uneven.ds_std == pytest.approx(abs(0.7 - 0.2) / 2.0)


def test_summarize_cv_pools_distance():
    rows = [
        _metric("a", 1, 0.9, collisions=2, distance=500.0),
        _metric("b", 1, 0.9, collisions=0, distance=1500.0),
    ]
    report = summarize("stub", rows)
    assert report.cv_mean == pytest.approx(2.0 / 2.0)  # 2 hits over 2 km


def test_summarize_empty_rows():
    report = summarize("stub", [])
    assert report.ds_mean == 0.0
    assert report.cv_mean == 0.0


def test_benchmark_report_table_and_json():
    rows = [_metric("route-x", 7, 0.5, collisions=1)]
    report = summarize("stub", rows, provenance={"k": "v"})
    text = report.table()
    assert "route-x" in text
    assert "DS mean +/- std over seeds" in text
    data = report.to_json()
    assert data["planner"] == "stub"
    assert data["provenance"] == {"k": "v"}
    assert data["rows"][0]["is"] == 1.0


def test_evaluate_suite_runs_specs(tmp_path):
    specs = [
        ScenarioSpec("short-a", "straight", seed=3, params={"n_lead": 0, "length": 70.0}),
        ScenarioSpec("short-b", "straight", seed=4, params={"n_lead": 0, "length": 70.0}),
    ]
    report, traces = evaluate_suite(
        ExpertPlanner(), specs, EvalConfig(), provenance={"suite": "mini"},
        keep_traces=True,
    )
    assert [r.route for r in report.rows] == ["short-a", "short-b"]
    assert report.ds_mean > 0.9
    assert report.provenance == {"suite": "mini"}
    assert len(traces) == 2

    parallel, _ = evaluate_suite(ExpertPlanner(), specs, EvalConfig(), jobs=2)
    for a, b in zip(report.rows, parallel.rows):
        assert a.to_json() == b.to_json()


# -- relevance sources ------------------------------------------------------


def _tok(vid, x, y):
    return ObjectToken(TokenKind.VEHICLE, 0.0, x, y, 0.0, 2.0, 4.5, vid)


def test_inverse_distance_relevance_orders_by_proximity():
    tokens = [
        _tok("far", 20.0, 0.0),
        _tok("near", 3.0, 4.0),
        ObjectToken(TokenKind.ROUTE_SEGMENT, 0.0, 5.0, 0.0, 0.0, 3.5, 10.0, None),
    ]
    ranking = inverse_distance_relevance(tokens)
    assert ranking.order == ["near", "far"]
    assert ranking.scores["near"] == pytest.approx(1.0 / 5.0)
    assert "route" not in ranking.scores


def test_inverse_distance_relevance_caps_at_contact():
    ranking = inverse_distance_relevance([_tok("ontop", 0.0, 0.0)])
    assert ranking.scores["ontop"] == pytest.approx(10.0)


def test_inverse_distance_tie_breaks_by_id():
    ranking = inverse_distance_relevance([_tok("b", 5.0, 0.0), _tok("a", 0.0, 5.0)])
    assert ranking.order == ["a", "b"]


def test_ablation_relevance_matches_manual_removal(tiny_cfg, tiny_params, tiny_tokens):
    ranking = ablation_relevance(tiny_params, tiny_cfg, tiny_tokens, "green")
    base, _ = forward_numpy(tiny_tokens, "green", tiny_params, tiny_cfg)
    for i, tok in enumerate(tiny_tokens):
        if tok.kind is not TokenKind.VEHICLE:
            continue
        reduced = tiny_tokens[:i] + tiny_tokens[i + 1:]
        moved, _ = forward_numpy(reduced, "green", tiny_params, tiny_cfg)
        assert ranking.scores[tok.source_id] == pytest.approx(
            float(np.abs(base - moved).sum())
        )
    assert ranking.order == sorted(
        ranking.scores, key=lambda vid: (-ranking.scores[vid], vid)
    )


def test_attention_source_matches_cls_mass(tiny_cfg, tiny_params):
    world = straight_world(
        vehicles=[
            ("aa", 25.0, 3.0, "idm", None),
            ("bb", 40.0, 5.0, "idm", None),
        ]
    )
    fov = FovConfig()
    source = AttentionSource(tiny_params, tiny_cfg, fov)
    ranking = source.rank(world, "ego")

    tokens, light = tokenize_scene(world, "ego", fov, n_s=tiny_cfg.n_s,
                                   l_max=tiny_cfg.l_max, rdp_epsilon=0.5)
    _, attn = forward_numpy(tokens, light, tiny_params, tiny_cfg)
    mass = attn[:, :, 0, :].sum(axis=(0, 1))
    for i, tok in enumerate(tokens):
        if tok.kind is TokenKind.VEHICLE:
            assert ranking.scores[tok.source_id] == pytest.approx(float(mass[i + 1]))


def test_inverse_distance_source_uses_scene_tokens(tiny_cfg):
    world = straight_world(
        vehicles=[
            ("close", 16.0, 0.0, "idm", None),
            ("distant", 35.0, 0.0, "idm", None),
        ]
    )
    source = InverseDistanceSource(FovConfig())
    ranking = source.rank(world, "ego")
    assert ranking.order[0] == "close"


# -- RFDS -------------------------------------------------------------------


def test_rfds_score_is_ratio_of_means():
    specs = [ScenarioSpec("s", "straight", seed=3, params={"n_lead": 0, "length": 70.0})]
    source = InverseDistanceSource(FovConfig())
    fake_unrestricted = summarize("expert", [_metric("s", 3, 0.8)])
    result = rfds(source, specs, EvalConfig(), unrestricted=fake_unrestricted)
    assert result.source == "inverse_distance"
    assert result.score == pytest.approx(result.restricted.ds_mean / 0.8)
    payload = result.to_json()
    assert payload["restricted"]["planner"] == "expert@inverse_distance"


def test_rfds_empty_road_restriction_is_harmless():
    # nothing to see: the restricted expert behaves like the full expert
    specs = [ScenarioSpec("s", "straight", seed=5, params={"n_lead": 0, "length": 70.0})]
    source = InverseDistanceSource(FovConfig())
    result = rfds(source, specs, EvalConfig())
    assert result.score == pytest.approx(1.0, abs=1e-6)


# -- SVG --------------------------------------------------------------------


def _svg_tokens():
    return [
        ObjectToken(TokenKind.ROUTE_SEGMENT, 0.0, 5.0, 0.0, 0.0, 3.5, 10.0, None),
        ObjectToken(TokenKind.ROUTE_SEGMENT, 1.0, 15.0, 0.0, 0.0, 3.5, 10.0, None),
        _tok("v1", 10.0, 3.0),
        _tok("v2", -8.0, -2.0),
    ]


def test_svg_is_well_formed_with_expected_elements():
    ranking = RelevanceRanking(order=["v1", "v2"], scores={"v1": 2.0, "v2": 0.5})
    plan = np.array([[0.6, 0.0], [1.2, 0.0], [1.8, 0.1], [2.4, 0.1]])
    text = render_scene_svg(_svg_tokens(), light="red", ranking=ranking, plan=plan)
    root = ET.fromstring(text)
    assert root.tag.endswith("svg")
    ns = {"s": "http://www.w3.org/2000/svg"}
    polygons = root.findall("s:polygon", ns)
    assert len(polygons) == 5  # 2 route + 2 vehicles + ego
    circles = root.findall("s:circle", ns)
    assert len(circles) == 5  # 4 waypoints + light lamp


def test_svg_top1_gets_bold_outline():
    ranking = RelevanceRanking(order=["v1", "v2"], scores={"v1": 2.0, "v2": 0.5})
    text = render_scene_svg(_svg_tokens(), ranking=ranking)
    root = ET.fromstring(text)
    ns = {"s": "http://www.w3.org/2000/svg"}
    reds = [
        p for p in root.findall("s:polygon", ns)
        if p.get("stroke") == "#cc0000" and p.get("stroke-width") == "3"
    ]
    assert len(reds) == 1


def test_svg_light_lamp_color():
    red = render_scene_svg(_svg_tokens(), light="red")
    green = render_scene_svg(_svg_tokens(), light="green")
    assert "#cc0000" in red
    assert "#1c9c34" in green


def test_svg_relevance_shading_monotone():
    ranking = RelevanceRanking(order=["v1", "v2"], scores={"v1": 4.0, "v2": 1.0})
    text = render_scene_svg(_svg_tokens(), ranking=ranking)
    root = ET.fromstring(text)
    ns = {"s": "http://www.w3.org/2000/svg"}
    fills = [
        p.get("fill") for p in root.findall("s:polygon", ns)
        if p.get("fill", "").startswith("rgb")
    ]
    shades = [int(f.split(",")[1]) for f in fills]
    assert len(shades) == 2
    assert min(shades) == 70  # full relevance: 230 - 160
    assert max(shades) > min(shades)
