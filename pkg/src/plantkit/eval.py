"""Closed-loop benchmark metrics, relevance scoring, and scene rendering.

Each planner is driven through the same tokenize -> plan -> PID -> step
loop. Per route: RC is route progress at episode end, IS multiplies a
penalty factor per infraction event, DS = RC x IS, and CV is ego
collisions per kilometer. The relevance protocol re-ranks vehicles
every frame and restricts the privileged expert to the top-1 vehicle;
its score is restricted mean DS over unrestricted mean DS.
"""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .geom import (
    FovConfig,
    ObjectToken,
    OrientedBox,
    Pose2,
    TokenKind,
    tokenize_scene,
)
from .model import PlanTConfig, RelevanceRanking, forward_numpy
from .nn.optim import ParamStore
from .pilot import (
    ExpertConfig,
    PidConfig,
    PidController,
    WaypointPlan,
    expert_decide,
    forecast_constant_speed,
    forecast_privileged,
)
from .sim.maps import Scenario, ScenarioSpec, build_scenario
from .sim.world import WorldState, detect_collisions, route_progress, step_world


@dataclass
class EvalConfig:
    max_ticks: int = 600
    blocked_ticks: int = 200
    blocked_speed: float = 0.1
    collision_penalty: float = 0.6
    red_light_penalty: float = 0.7
    deviation_m: float = 7.5

    def to_json(self) -> dict:
        return vars(self).copy()


@dataclass
class Trace:
    route: str
    seed: int
    ticks: int = 0
    progress: float = 0.0
    distance_m: float = 0.0
    status: str = "timeout"
    error: str | None = None
    events: list[tuple[int, str, str]] = field(default_factory=list)
    states: list[tuple[float, float, float, float]] = field(default_factory=list)


@dataclass
class RouteMetrics:
    route: str
    seed: int
    rc: float
    is_: float
    ds: float
    collisions_per_km: float
    infractions: dict[str, int]
    status: str
    distance_m: float = 0.0
    error: str | None = None
    cv_undefined: bool = False

    def to_json(self) -> dict:
        return {
            "route": self.route, "seed": self.seed, "rc": self.rc, "is": self.is_,
            "ds": self.ds, "collisions_per_km": self.collisions_per_km,
            "infractions": dict(self.infractions), "status": self.status,
            "distance_m": self.distance_m, "error": self.error,
            "cv_undefined": self.cv_undefined,
        }


def compute_driving_score(trace: Trace, cfg: EvalConfig) -> RouteMetrics:
    counts = {"collision": 0, "red_light": 0, "deviation": 0, "blocked": 0}
    for _, kind, _ in trace.events:
        counts[kind] += 1
    is_ = (cfg.collision_penalty ** counts["collision"]) * (
        cfg.red_light_penalty ** counts["red_light"]
    )
    # a crashed planner scores zero; zeroing rc keeps ds == rc * is_ exact
    rc = 0.0 if trace.error is not None else trace.progress
    km = trace.distance_m / 1000.0
    cv_undefined = km <= 0.0
    cv = 0.0 if cv_undefined else counts["collision"] / km
    ds = rc * is_
    return RouteMetrics(
        route=trace.route, seed=trace.seed, rc=rc, is_=is_, ds=ds,
        collisions_per_km=cv, infractions=counts, status=trace.status,
        distance_m=trace.distance_m, error=trace.error, cv_undefined=cv_undefined,
    )


# -- planners ---------------------------------------------------------------


class ExpertPlanner:
    """Privileged-forecast expert; the benchmark upper reference."""

    name = "expert"

    def __init__(self, expert_cfg: ExpertConfig | None = None, visible=None):
        self._template = expert_cfg or ExpertConfig()
        self._visible = visible
        self.cfg = self._template

    def reset(self, scenario: Scenario):
        self.cfg = ExpertConfig(
            **{**vars(self._template), "cruise_speed": scenario.target_speed}
        )

    def plan(self, world: WorldState, ego_id: str) -> WaypointPlan:
        forecast = forecast_privileged(world, self.cfg.horizon)
        _, plan = expert_decide(world, ego_id, forecast, visible=self._visible, cfg=self.cfg)
        return plan


class RuleBasedPlanner:
    """Same decision rule as the expert, but a constant-speed forecast."""

    name = "rule-based"

    def __init__(self, expert_cfg: ExpertConfig | None = None):
        self._template = expert_cfg or ExpertConfig()
        self.cfg = self._template

    def reset(self, scenario: Scenario):
        self.cfg = ExpertConfig(
            **{**vars(self._template), "cruise_speed": scenario.target_speed}
        )

    def plan(self, world: WorldState, ego_id: str) -> WaypointPlan:
        forecast = forecast_constant_speed(world, self.cfg.horizon)
        _, plan = expert_decide(world, ego_id, forecast, cfg=self.cfg)
        return plan


class PlanTPlanner:
    """Drives with the learned network's predicted waypoints."""

    def __init__(
        self,
        params: ParamStore,
        model_cfg: PlanTConfig,
        fov: FovConfig | None = None,
        rdp_epsilon: float = 0.5,
        name: str = "plant",
    ):
        self.params = params
        self.model_cfg = model_cfg
        self.fov = fov or FovConfig()
        self.rdp_epsilon = rdp_epsilon
        self.name = name

    def reset(self, scenario: Scenario):
        pass

    def tokenize(self, world: WorldState, ego_id: str):
        return tokenize_scene(
            world, ego_id, self.fov,
            n_s=self.model_cfg.n_s, l_max=self.model_cfg.l_max,
            rdp_epsilon=self.rdp_epsilon,
        )

    def plan(self, world: WorldState, ego_id: str) -> WaypointPlan:
        tokens, light = self.tokenize(world, ego_id)
        waypoints, _ = forward_numpy(tokens, light, self.params, self.model_cfg)
        return WaypointPlan(waypoints)


class RestrictedExpertPlanner:
    """Expert limited to the top-1 vehicle of a relevance source each frame."""

    def __init__(self, source, expert_cfg: ExpertConfig | None = None):
        self.source = source
        self._template = expert_cfg or ExpertConfig()
        self.cfg = self._template
        self.name = f"expert@{source.name}"

    def reset(self, scenario: Scenario):
        self.cfg = ExpertConfig(
            **{**vars(self._template), "cruise_speed": scenario.target_speed}
        )

    def plan(self, world: WorldState, ego_id: str) -> WaypointPlan:
        ranking = self.source.rank(world, ego_id)
        top = ranking.top1()
        visible = {top} if top is not None else set()
        forecast = forecast_privileged(world, self.cfg.horizon)
        _, plan = expert_decide(world, ego_id, forecast, visible=visible, cfg=self.cfg)
        return plan


# -- closed-loop episode ----------------------------------------------------


def run_route(
    planner,
    scenario: Scenario,
    cfg: EvalConfig | None = None,
    pid_cfg: PidConfig | None = None,
) -> tuple[RouteMetrics, Trace]:
    """Drive one scenario to completion, recording infractions."""
    cfg = cfg or EvalConfig()
    world = scenario.world
    ego_id = scenario.ego_id
    planner.reset(scenario)
    controller = PidController(pid_cfg)
    trace = Trace(route=scenario.spec.name, seed=scenario.spec.seed)

    ego = world.vehicle(ego_id)
    s_start = ego.s
    prev_s = ego.s
    blocked_run = 0
    active_pairs: set[tuple[str, str]] = set()

    for _ in range(cfg.max_ticks):
        ego = world.vehicle(ego_id)
        trace.states.append((ego.pose.x, ego.pose.y, ego.pose.yaw, ego.speed))
        try:
            plan = planner.plan(world, ego_id)
        except Exception as exc:
            trace.status = "planner-error"
            trace.error = repr(exc)
            break
        controls = controller.pid_control(plan, ego.speed)
        step_world(world, controls)
        trace.ticks += 1
        ego = world.vehicle(ego_id)

        pairs = {p for p in detect_collisions(world) if ego_id in p}
        for a, b in sorted(pairs - active_pairs):
            other = b if a == ego_id else a
            trace.events.append((world.tick, "collision", other))
        active_pairs = pairs

        for sig_s, light_id in ego.route.signals_ahead(prev_s, ego.s - prev_s, slack=0.0):
            if sig_s > prev_s and world.lights[light_id].phase == "red":
                trace.events.append((world.tick, "red_light", light_id))
        prev_s = ego.s

        lateral = ego.route.lateral_distance(ego.pose.x, ego.pose.y, ego.s)
        if lateral > cfg.deviation_m:
            trace.events.append((world.tick, "deviation", f"{lateral:.1f}m"))
            trace.status = "deviation"
            break
        blocked_run = blocked_run + 1 if ego.speed < cfg.blocked_speed else 0
        if blocked_run >= cfg.blocked_ticks:
            trace.events.append((world.tick, "blocked", f"{cfg.blocked_ticks} ticks"))
            trace.status = "blocked"
            break
        if route_progress(ego) >= 0.995:
            trace.status = "ok"
            break

    ego = world.vehicle(ego_id)
    trace.progress = route_progress(ego)
    trace.distance_m = max(ego.s - s_start, 0.0)
    return compute_driving_score(trace, cfg), trace


# -- suite evaluation -------------------------------------------------------


@dataclass
class BenchmarkReport:
    planner: str
    rows: list[RouteMetrics]
    ds_mean: float
    ds_std: float
    rc_mean: float
    is_mean: float
    cv_mean: float
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "planner": self.planner,
            "rows": [r.to_json() for r in self.rows],
            "ds_mean": self.ds_mean, "ds_std": self.ds_std,
            "rc_mean": self.rc_mean, "is_mean": self.is_mean, "cv_mean": self.cv_mean,
            "provenance": dict(self.provenance),
        }

    def table(self) -> str:
        """CLI table: route, RC, IS, DS (x100), CV."""
        lines = [f"{'route':<22} {'seed':>6} {'RC':>6} {'IS':>6} {'DS':>7} {'CV':>6}"]
        for r in self.rows:
            lines.append(
                f"{r.route:<22} {r.seed:>6} {r.rc * 100:6.1f} {r.is_ * 100:6.1f} "
                f"{r.ds * 100:7.2f} {r.collisions_per_km:6.2f}"
            )
        lines.append(
            f"{'mean':<22} {'':>6} {self.rc_mean * 100:6.1f} {self.is_mean * 100:6.1f} "
            f"{self.ds_mean * 100:7.2f} {self.cv_mean:6.2f}"
        )
        lines.append(f"DS mean +/- std over seeds: "
                     f"{self.ds_mean * 100:.2f} +/- {self.ds_std * 100:.2f}")
        return "\n".join(lines)


def summarize(planner_name: str, rows: list[RouteMetrics], provenance=None) -> BenchmarkReport:
    by_seed: dict[int, list[float]] = {}
    for r in rows:
        by_seed.setdefault(r.seed, []).append(r.ds)
    seed_means = [float(np.mean(v)) for _, v in sorted(by_seed.items())]
    # CV aggregated as total ego collision events over total distance driven
    total_collisions = sum(r.infractions["collision"] for r in rows)
    total_km = sum(r.distance_m for r in rows) / 1000.0
    cv_mean = total_collisions / total_km if total_km > 0.0 else 0.0
    return BenchmarkReport(
        planner=planner_name,
        rows=rows,
        ds_mean=float(np.mean([r.ds for r in rows])) if rows else 0.0,
        ds_std=float(np.std(seed_means)) if seed_means else 0.0,
        rc_mean=float(np.mean([r.rc for r in rows])) if rows else 0.0,
        is_mean=float(np.mean([r.is_ for r in rows])) if rows else 0.0,
        cv_mean=cv_mean,
        provenance=dict(provenance or {}),
    )


def _route_task(task):
    planner, spec, cfg, pid_cfg = task
    scenario = build_scenario(spec)
    return run_route(planner, scenario, cfg, pid_cfg)


def evaluate_suite(
    planner,
    specs: list[ScenarioSpec],
    cfg: EvalConfig | None = None,
    pid_cfg: PidConfig | None = None,
    provenance: dict | None = None,
    keep_traces: bool = False,
    jobs: int = 1,
):
    """Run every scenario; returns (BenchmarkReport, traces or None)."""
    tasks = [(planner, spec, cfg, pid_cfg) for spec in specs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_route_task, tasks))
    else:
        results = [_route_task(t) for t in tasks]
    rows = [m for m, _ in results]
    traces = [t for _, t in results] if keep_traces else None
    return summarize(planner.name, rows, provenance), traces


# -- relevance sources ------------------------------------------------------


def inverse_distance_relevance(tokens: list[ObjectToken]) -> RelevanceRanking:
    """Closest vehicle first: score = 1 / max(distance, 0.1)."""
    scores = {}
    for tok in tokens:
        if tok.kind is TokenKind.VEHICLE:
            scores[tok.source_id] = 1.0 / max(math.hypot(tok.x, tok.y), 0.1)
    order = sorted(scores, key=lambda vid: (-scores[vid], vid))
    return RelevanceRanking(order=order, scores=scores)


def ablation_relevance(
    params: ParamStore,
    cfg: PlanTConfig,
    tokens: list[ObjectToken],
    light: str,
) -> RelevanceRanking:
    """Score each vehicle by how much removing its token moves the waypoints."""
    base, _ = forward_numpy(tokens, light, params, cfg)
    scores = {}
    for i, tok in enumerate(tokens):
        if tok.kind is not TokenKind.VEHICLE:
            continue
        reduced = tokens[:i] + tokens[i + 1:]
        moved, _ = forward_numpy(reduced, light, params, cfg)
        scores[tok.source_id] = float(np.abs(base - moved).sum())
    order = sorted(scores, key=lambda vid: (-scores[vid], vid))
    return RelevanceRanking(order=order, scores=scores)


class AttentionSource:
    name = "attention"

    def __init__(self, params, model_cfg: PlanTConfig, fov: FovConfig, rdp_epsilon=0.5):
        self.planner = PlanTPlanner(params, model_cfg, fov, rdp_epsilon)

    def rank(self, world: WorldState, ego_id: str) -> RelevanceRanking:
        tokens, light = self.planner.tokenize(world, ego_id)
        _, attn = forward_numpy(tokens, light, self.planner.params, self.planner.model_cfg)
        cls_rows = attn[:, :, 0, :].sum(axis=(0, 1))
        scores = {
            tok.source_id: float(cls_rows[i + 1])
            for i, tok in enumerate(tokens)
            if tok.kind is TokenKind.VEHICLE
        }
        order = sorted(scores, key=lambda vid: (-scores[vid], vid))
        return RelevanceRanking(order=order, scores=scores)


class AblationSource:
    name = "ablation"

    def __init__(self, params, model_cfg: PlanTConfig, fov: FovConfig, rdp_epsilon=0.5):
        self.planner = PlanTPlanner(params, model_cfg, fov, rdp_epsilon)

    def rank(self, world: WorldState, ego_id: str) -> RelevanceRanking:
        tokens, light = self.planner.tokenize(world, ego_id)
        return ablation_relevance(self.planner.params, self.planner.model_cfg, tokens, light)


class InverseDistanceSource:
    name = "inverse_distance"

    def __init__(self, fov: FovConfig, n_s: int = 2, l_max: float = 10.0, rdp_epsilon=0.5):
        self.fov = fov
        self.n_s = n_s
        self.l_max = l_max
        self.rdp_epsilon = rdp_epsilon

    def rank(self, world: WorldState, ego_id: str) -> RelevanceRanking:
        tokens, _ = tokenize_scene(
            world, ego_id, self.fov, n_s=self.n_s, l_max=self.l_max,
            rdp_epsilon=self.rdp_epsilon,
        )
        return inverse_distance_relevance(tokens)


# -- relative filtered driving score ----------------------------------------


@dataclass
class RfdsResult:
    source: str
    score: float
    restricted: BenchmarkReport
    unrestricted: BenchmarkReport

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "score": self.score,
            "restricted": self.restricted.to_json(),
            "unrestricted": self.unrestricted.to_json(),
        }


def rfds(
    source,
    specs: list[ScenarioSpec],
    cfg: EvalConfig | None = None,
    expert_cfg: ExpertConfig | None = None,
    pid_cfg: PidConfig | None = None,
    unrestricted: BenchmarkReport | None = None,
    jobs: int = 1,
) -> RfdsResult:
    """Restricted-expert mean DS divided by unrestricted-expert mean DS."""
    if unrestricted is None:
        unrestricted, _ = evaluate_suite(
            ExpertPlanner(expert_cfg), specs, cfg, pid_cfg, jobs=jobs
        )
    restricted_planner = RestrictedExpertPlanner(source, expert_cfg)
    restricted, _ = evaluate_suite(restricted_planner, specs, cfg, pid_cfg, jobs=jobs)
    denom = unrestricted.ds_mean
    score = restricted.ds_mean / denom if denom > 0 else 0.0
    return RfdsResult(
        source=source.name, score=score,
        restricted=restricted, unrestricted=unrestricted,
    )


# -- SVG rendering ----------------------------------------------------------

_SVG_NS = "http://www.w3.org/2000/svg"


def render_scene_svg(
    tokens: list[ObjectToken],
    light: str = "green",
    ranking: RelevanceRanking | None = None,
    plan: np.ndarray | None = None,
    half_extent: float = 35.0,
    size: int = 480,
) -> str:
    """Bird's-eye SVG of one tokenized frame (ego frame, ego at center).

    Vehicles shade from light to dark red with relevance; the top-1
    vehicle gets a bold red outline; route segments are pale blue;
    waypoints are black dots.
    """
    scale = size / (2.0 * half_extent)

    def pt(x: float, y: float) -> tuple[float, float]:
        return (size / 2.0 + x * scale, size / 2.0 - y * scale)

    def poly_points(box: OrientedBox) -> str:
        return " ".join(f"{px:.2f},{py:.2f}" for px, py in (pt(cx, cy) for cx, cy in box.corners()))

    svg = ET.Element(
        "svg", xmlns=_SVG_NS, width=str(size), height=str(size),
        viewBox=f"0 0 {size} {size}",
    )
    ET.SubElement(svg, "rect", x="0", y="0", width=str(size), height=str(size),
                  fill="#fafafa")

    max_score = 0.0
    scores = ranking.scores if ranking else {}
    if scores:
        max_score = max(scores.values()) or 0.0
    top = ranking.top1() if ranking else None

    for tok in tokens:
        box = OrientedBox(Pose2(tok.x, tok.y, tok.yaw), tok.w, tok.h)
        if tok.kind is TokenKind.ROUTE_SEGMENT:
            ET.SubElement(svg, "polygon", points=poly_points(box),
                          fill="#cfe2ff", stroke="#6699cc", **{"stroke-width": "1"},
                          opacity="0.7")
    for tok in tokens:
        if tok.kind is not TokenKind.VEHICLE:
            continue
        box = OrientedBox(Pose2(tok.x, tok.y, tok.yaw), tok.w, tok.h)
        rel = 0.0
        if tok.source_id in scores and max_score > 0:
            rel = scores[tok.source_id] / max_score
        shade = int(230 - 160 * rel)
        fill = f"rgb(230,{shade},{shade})"
        attrs = {"points": poly_points(box), "fill": fill,
                 "stroke": "#333333", "stroke-width": "1"}
        if tok.source_id == top and top is not None:
            attrs["stroke"] = "#cc0000"
            attrs["stroke-width"] = "3"
        ET.SubElement(svg, "polygon", **attrs)

    ego_box = OrientedBox(Pose2(0.0, 0.0, 0.0), 2.0, 4.5)
    ET.SubElement(svg, "polygon", points=poly_points(ego_box),
                  fill="#2e8b57", stroke="#0f3f26", **{"stroke-width": "1.5"})

    if plan is not None:
        for wx, wy in np.asarray(plan, dtype=np.float64):
            px, py = pt(float(wx), float(wy))
            ET.SubElement(svg, "circle", cx=f"{px:.2f}", cy=f"{py:.2f}",
                          r="3", fill="#111111")

    light_color = "#cc0000" if light == "red" else "#1c9c34"
    ET.SubElement(svg, "circle", cx="20", cy="20", r="10", fill=light_color)

    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(svg, encoding="unicode")
