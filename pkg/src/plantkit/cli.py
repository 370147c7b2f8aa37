"""Command-line entry point: data generation, training, evaluation, rendering.

Every subcommand accepts `--config <json>` plus repeatable dotted-key
overrides (`--set model.hidden=64`). Outputs land under `--out` and
carry the config hash, seed, and overrides that produced them. Exit
codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, canonical_json, load_run_config
from .geom import InvalidInputError, ObjectToken, TokenKind
from .model import (
    PlanTConfig,
    compute_loss,
    forward,
    forward_numpy,
    init_params,
    quantize_attribute,
)
from .scenarios import suite_by_name
from .sim.maps import ScenarioError, build_scenario
from .sim.world import Controls, step_world
from .train import CheckpointIncompatibleError

_EXIT_OK = 0
_EXIT_VALIDATION = 1
_EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (
    ConfigError,
    InvalidInputError,
    ScenarioError,
    CheckpointIncompatibleError,
    FileNotFoundError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Unknown flags print usage and exit 1 instead of argparse's exit 2."""

    def error(self, message):
        raise _UsageError(message)


def _default_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _add_common(parser: argparse.ArgumentParser, out_default: str):
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="dotted-key override, e.g. --set model.hidden=64",
    )
    parser.add_argument("--out", default=out_default, help="output directory")
    parser.add_argument("--jobs", type=int, default=_default_jobs(),
                        help="parallel episode workers")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plantkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[], help="run the expert, write a dataset")
    _add_common(p, "runs/dataset")
    p.add_argument("--suite", default=None, help="scenario suite (default: config)")

    p = sub.add_parser("train", help="fit the planner on a dataset")
    _add_common(p, "runs/model")
    p.add_argument("--data", required=True, help="dataset directory from generate-data")

    p = sub.add_parser("evaluate", help="closed-loop benchmark for one planner")
    _add_common(p, "runs/eval")
    p.add_argument("--planner", required=True,
                   choices=["expert", "rule-based", "plant"])
    p.add_argument("--checkpoint", default=None, help="model checkpoint (plant only)")
    p.add_argument("--suite", default=None)

    p = sub.add_parser("rfds", help="relevance-filtered driving score")
    _add_common(p, "runs/rfds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", default="all",
                   choices=["all", "attention", "ablation", "inverse_distance"])
    p.add_argument("--suite", default=None)

    p = sub.add_parser("render", help="render one scene to SVG")
    _add_common(p, "runs/render")
    p.add_argument("--route", required=True, help="scenario name, e.g. straight-00-s101")
    p.add_argument("--tick", type=int, default=0, help="expert-driven warmup ticks")
    p.add_argument("--checkpoint", default=None,
                   help="rank and plan with this model instead of the expert")
    p.add_argument("--suite", default=None)

    p = sub.add_parser("selfcheck", help="gradient and oracle sanity suite")
    _add_common(p, "runs/selfcheck")

    return parser


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _suite_specs(cfg: RunConfig, flag: str | None):
    return suite_by_name(flag or cfg.raw["suite"])


# -- subcommands ------------------------------------------------------------


def _cmd_generate_data(args, cfg: RunConfig) -> int:
    from .train import collect_dataset

    specs = _suite_specs(cfg, args.suite)
    out = Path(args.out)
    started = time.time()
    manifest = collect_dataset(specs, cfg.collect_cfg(), out, jobs=args.jobs)
    payload = cfg.provenance() | {
        "suite": args.suite or cfg.raw["suite"],
        "n_episodes": len(manifest.episodes),
        "n_frames": manifest.n_frames,
        "elapsed_s": round(time.time() - started, 2),
    }
    _write_json(out / "provenance.json", payload)
    ok = sum(1 for e in manifest.episodes if e.status == "ok")
    print(f"collected {manifest.n_frames} frames from {ok}/{len(manifest.episodes)} "
          f"episodes -> {out}")
    if ok == 0:
        print("no successful expert episodes", file=sys.stderr)
        return _EXIT_RUNTIME
    return _EXIT_OK


def _cmd_train(args, cfg: RunConfig) -> int:
    from .train import load_dataset, train
    from .viz import plot_training_history

    frames, manifest = load_dataset(args.data)
    if not frames:
        print(f"dataset {args.data} holds no frames", file=sys.stderr)
        return _EXIT_VALIDATION
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    result = train(
        frames, cfg.model_cfg(), cfg.train_cfg(), out_dir=out,
        log=lambda msg: print(msg),
    )
    payload = cfg.provenance() | {
        "dataset": str(args.data),
        "dataset_hash": manifest.config_hash,
        "n_frames": len(frames),
        "elapsed_s": round(time.time() - started, 2),
    }
    _write_json(out / "provenance.json", payload)
    _write_csv(
        out / "history.csv",
        ["epoch", "lr", "waypoint_loss", "vehicle_loss"],
        [[h["epoch"], h["lr"], h["waypoint_loss"], h["vehicle_loss"]]
         for h in result.history],
    )
    plot_training_history(result.history, str(out / "history.png"))
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final waypoint loss "
          f"{last['waypoint_loss']:.4f} -> {result.checkpoint_path}")
    return _EXIT_OK


def _build_planner(name: str, checkpoint: str | None, cfg: RunConfig):
    from .eval import ExpertPlanner, PlanTPlanner, RuleBasedPlanner
    from .train import load_model_checkpoint

    if name == "expert":
        return ExpertPlanner(cfg.expert_cfg())
    if name == "rule-based":
        return RuleBasedPlanner(cfg.expert_cfg())
    if checkpoint is None:
        raise ConfigError("--checkpoint is required for --planner plant")
    params, model_cfg, _ = load_model_checkpoint(checkpoint)
    return PlanTPlanner(
        params, model_cfg, cfg.fov_cfg(),
        rdp_epsilon=float(cfg.raw["collect"]["rdp_epsilon"]),
    )


def _report_rows(report) -> list[list]:
    return [
        [r.route, r.seed, f"{r.rc:.4f}", f"{r.is_:.4f}", f"{r.ds:.4f}",
         f"{r.collisions_per_km:.4f}", r.status]
        for r in report.rows
    ]


def _cmd_evaluate(args, cfg: RunConfig) -> int:
    from .eval import evaluate_suite
    from .viz import plot_benchmark, plot_traces

    planner = _build_planner(args.planner, args.checkpoint, cfg)
    specs = _suite_specs(cfg, args.suite)
    started = time.time()
    report, traces = evaluate_suite(
        planner, specs, cfg.eval_cfg(), cfg.pid_cfg(),
        provenance=cfg.provenance() | {"suite": args.suite or cfg.raw["suite"]},
        keep_traces=True, jobs=args.jobs,
    )
    out = Path(args.out)
    payload = report.to_json()
    payload["elapsed_s"] = round(time.time() - started, 2)
    _write_json(out / "report.json", payload)
    _write_csv(out / "report.csv",
               ["route", "seed", "rc", "is", "ds", "cv", "status"],
               _report_rows(report))
    plot_benchmark({planner.name: report}, str(out / "report.png"))
    plot_traces(traces, str(out / "traces.png"))
    print(report.table())
    print(f"wrote {out / 'report.json'}")
    return _EXIT_OK


def _cmd_rfds(args, cfg: RunConfig) -> int:
    from .eval import (
        AblationSource,
        AttentionSource,
        ExpertPlanner,
        InverseDistanceSource,
        evaluate_suite,
        rfds,
    )
    from .train import load_model_checkpoint
    from .viz import plot_rfds

    params, model_cfg, _ = load_model_checkpoint(args.checkpoint)
    fov = cfg.fov_cfg()
    rdp = float(cfg.raw["collect"]["rdp_epsilon"])
    sources = {
        "attention": AttentionSource(params, model_cfg, fov, rdp),
        "ablation": AblationSource(params, model_cfg, fov, rdp),
        "inverse_distance": InverseDistanceSource(
            fov, model_cfg.n_s, model_cfg.l_max, rdp
        ),
    }
    wanted = list(sources) if args.source == "all" else [args.source]
    specs = _suite_specs(cfg, args.suite)
    eval_cfg, pid_cfg, expert_cfg = cfg.eval_cfg(), cfg.pid_cfg(), cfg.expert_cfg()
    unrestricted, _ = evaluate_suite(
        ExpertPlanner(expert_cfg), specs, eval_cfg, pid_cfg, jobs=args.jobs
    )
    results = [
        rfds(sources[name], specs, eval_cfg, expert_cfg, pid_cfg,
             unrestricted=unrestricted, jobs=args.jobs)
        for name in wanted
    ]
    out = Path(args.out)
    _write_json(out / "rfds.json", {
        "provenance": cfg.provenance() | {"suite": args.suite or cfg.raw["suite"]},
        "results": [r.to_json() for r in results],
    })
    _write_csv(out / "rfds.csv",
               ["source", "rfds", "restricted_ds", "unrestricted_ds"],
               [[r.source, f"{r.score:.4f}", f"{r.restricted.ds_mean:.4f}",
                 f"{r.unrestricted.ds_mean:.4f}"] for r in results])
    plot_rfds(results, str(out / "rfds.png"))
    for r in results:
        print(f"RFDS[{r.source}] = {r.score:.3f} "
              f"({r.restricted.ds_mean * 100:.1f} / {r.unrestricted.ds_mean * 100:.1f})")
    return _EXIT_OK


def _cmd_render(args, cfg: RunConfig) -> int:
    from .eval import (
        AttentionSource,
        ExpertPlanner,
        InverseDistanceSource,
        render_scene_svg,
    )
    from .geom import tokenize_scene
    from .pilot import PidController
    from .train import load_model_checkpoint

    specs = _suite_specs(cfg, args.suite)
    matches = [s for s in specs if s.name == args.route]
    if not matches:
        names = ", ".join(s.name for s in specs[:6])
        raise ConfigError(f"route {args.route!r} not in suite; first routes: {names} ...")
    scenario = build_scenario(matches[0])
    world, ego_id = scenario.world, scenario.ego_id

    planner = ExpertPlanner(cfg.expert_cfg())
    planner.reset(scenario)
    controller = PidController(cfg.pid_cfg())
    for _ in range(max(args.tick, 0)):
        plan = planner.plan(world, ego_id)
        controller_out = controller.pid_control(plan, world.vehicle(ego_id).speed)
        step_world(world, controller_out)

    model_cfg = cfg.model_cfg()
    rdp = float(cfg.raw["collect"]["rdp_epsilon"])
    tokens, light = tokenize_scene(
        world, ego_id, cfg.fov_cfg(), n_s=model_cfg.n_s,
        l_max=model_cfg.l_max, rdp_epsilon=rdp,
    )
    if args.checkpoint:
        params, ckpt_cfg, _ = load_model_checkpoint(args.checkpoint)
        ranking = AttentionSource(params, ckpt_cfg, cfg.fov_cfg(), rdp).rank(world, ego_id)
        plan_xy, _ = forward_numpy(tokens, light, params, ckpt_cfg)
    else:
        ranking = InverseDistanceSource(
            cfg.fov_cfg(), model_cfg.n_s, model_cfg.l_max, rdp
        ).rank(world, ego_id)
        plan_xy = planner.plan(world, ego_id).waypoints
    svg = render_scene_svg(tokens, light, ranking=ranking, plan=plan_xy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.route}-t{args.tick}.svg"
    path.write_text(svg)
    _write_json(out / "provenance.json",
                cfg.provenance() | {"route": args.route, "tick": args.tick})
    print(f"wrote {path}")
    return _EXIT_OK


# -- selfcheck --------------------------------------------------------------


def _tiny_tokens():
    return [
        ObjectToken(TokenKind.VEHICLE, 3.0, 8.0, 1.0, 0.1, 2.0, 4.5, "v1"),
        ObjectToken(TokenKind.VEHICLE, 0.0, 14.0, -2.5, -0.2, 2.0, 4.5, "v2"),
        ObjectToken(TokenKind.ROUTE_SEGMENT, 0.0, 4.0, 0.0, 0.0, 3.5, 8.0, None),
        ObjectToken(TokenKind.ROUTE_SEGMENT, 1.0, 12.0, 0.3, 0.05, 3.5, 8.0, None),
    ]


def _check_gradients() -> tuple[bool, str]:
    cfg = PlanTConfig(hidden=16, heads=2, layers=1)
    rng = np.random.default_rng(7)
    params = init_params(cfg, rng)
    tokens = _tiny_tokens()
    gt_wp = rng.normal(scale=2.0, size=(cfg.n_waypoints, 2))
    gt_next = {
        "v1": np.array([2.5, 9.0, 1.0, 0.1, 2.0, 4.5]),
        "v2": np.array([0.0, 14.0, -2.5, -0.2, 2.0, 4.5]),
    }

    def loss_value() -> float:
        out = forward(tokens, "red", params, cfg)
        total, _, _ = compute_loss(out, gt_wp, gt_next, cfg)
        return float(total.data)

    params.zero_grad()
    out = forward(tokens, "red", params, cfg)
    total, _, _ = compute_loss(out, gt_wp, gt_next, cfg)
    total.backward()

    # h=1e-5: the difference noise 2.2e-16*|L|/(2h) must stay well below
    # the 1e-6 scale floor or near-zero gradients fail spuriously
    eps = 1e-5
    worst = 0.0
    sample = np.random.default_rng(11)
    for name in sorted(params.names()):
        tensor = params[name]
        flat = tensor.data.reshape(-1)
        idx = int(sample.integers(flat.size))
        keep = flat[idx]
        flat[idx] = keep + eps
        up = loss_value()
        flat[idx] = keep - eps
        down = loss_value()
        flat[idx] = keep
        numeric = (up - down) / (2 * eps)
        analytic = tensor.grad.reshape(-1)[idx]
        scale = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst < 1e-4, f"max relative gradient error {worst:.2e}"


def _check_forward_parity() -> tuple[bool, str]:
    cfg = PlanTConfig(hidden=16, heads=2, layers=2)
    params = init_params(cfg, np.random.default_rng(3))
    tokens = _tiny_tokens()
    out = forward(tokens, "green", params, cfg)
    wp_np, attn_np = forward_numpy(tokens, "green", params, cfg)
    gap = max(
        float(np.abs(out.waypoints.data - wp_np).max()),
        float(np.abs(out.attention - attn_np).max()),
    )
    return gap < 1e-9, f"autodiff vs numpy forward gap {gap:.2e}"


def _check_quantization() -> tuple[bool, str]:
    cfg = PlanTConfig()
    cases = [
        (2, 0.0, 64), (3, 0.0, 64), (2, -30.0, 0), (2, 29.999, 127),
        (1, 15.0, 3), (1, 0.0, 0), (4, 0.0, 0),
    ]
    for attr, value, want in cases:
        got = quantize_attribute(value, attr, cfg)
        if got != want:
            return False, f"attribute {attr} value {value} -> bin {got}, wanted {want}"
    return True, f"{len(cases)} bin assignments exact"


def _check_sim_determinism() -> tuple[bool, str]:
    from .scenarios import starter_suite

    spec = starter_suite()[0]
    blobs = []
    for _ in range(2):
        scenario = build_scenario(spec)
        controls = Controls(steer=0.0, throttle=0.4, brake=0.0)
        for _ in range(40):
            step_world(scenario.world, controls)
        blobs.append(canonical_json(scenario.world.serialize()))
    return blobs[0] == blobs[1], f"40-tick world state identical ({len(blobs[0])} bytes)"


def _check_pid_symmetry() -> tuple[bool, str]:
    from .pilot import PidController, WaypointPlan

    plan = WaypointPlan(np.array([[1.0, 0.4], [2.0, 0.9], [3.0, 1.3], [4.0, 1.6]]))
    mirrored = WaypointPlan(plan.waypoints * np.array([1.0, -1.0]))
    left = PidController().pid_control(plan, 3.0)
    right = PidController().pid_control(mirrored, 3.0)
    gap = abs(left.steer + right.steer)
    return gap < 1e-12, f"mirrored plan flips steering sign (gap {gap:.1e})"


def _cmd_selfcheck(args, cfg: RunConfig) -> int:
    checks = [
        ("gradient-check", _check_gradients),
        ("forward-parity", _check_forward_parity),
        ("quantization", _check_quantization),
        ("sim-determinism", _check_sim_determinism),
        ("pid-symmetry", _check_pid_symmetry),
    ]
    failures = 0
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, repr(exc)
        tag = "ok" if ok else "FAIL"
        print(f"[{tag}] {name}: {detail}")
        failures += 0 if ok else 1
    print(f"selfcheck: {len(checks) - failures}/{len(checks)} passed "
          f"(config {cfg.hash()})")
    return _EXIT_OK if failures == 0 else _EXIT_RUNTIME


# -- dispatch ---------------------------------------------------------------

_COMMANDS = {
    "generate-data": _cmd_generate_data,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "rfds": _cmd_rfds,
    "render": _cmd_render,
    "selfcheck": _cmd_selfcheck,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"plantkit: error: {exc}", file=sys.stderr)
        return _EXIT_VALIDATION
    try:
        cfg = load_run_config(args.config, list(args.set))
        return _COMMANDS[args.command](args, cfg)
    except _VALIDATION_ERRORS as exc:
        print(f"plantkit: {exc}", file=sys.stderr)
        return _EXIT_VALIDATION
    except Exception as exc:
        print(f"plantkit: runtime failure: {exc!r}", file=sys.stderr)
        return _EXIT_RUNTIME


def main(argv: list[str] | None = None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
