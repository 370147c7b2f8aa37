"""Run configuration: defaults tree, JSON loading, dotted overrides, hashing.

A run config is a plain nested dict (so overrides and hashing stay
trivial); typed accessors construct the per-module dataclasses on
demand. Every output artifact embeds ``config_hash`` of the merged
tree plus the seed, which together determine all stored bytes.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid configuration input (bad key, bad value, bad file)."""


DEFAULTS: dict = {
    "seed": 0,
    "suite": "starter",
    "fov": {
        "d_max": 30.0,
        "side": 30.0,
        "back": 30.0,
        "include_speed": True,
    },
    "model": {
        "hidden": 64,
        "layers": 4,
        "heads": 4,
        "ffn_mult": 4,
        "n_waypoints": 4,
        "z_pos": 128,
        "z_speed": 4,
        "z_yaw": 32,
        "z_ext": 32,
        "aux_weight": 0.2,
        "d_max": 30.0,
        "n_s": 2,
        "l_max": 10.0,
        "v_max": 15.0,
        "ext_max": 10.0,
        "dropout": 0.0,
    },
    "expert": {
        "cruise_speed": 6.0,
        "horizon": 20,
        "inflation": 0.5,
        "n_waypoints": 4,
        "dt_wp": 0.1,
        "light_lookahead": 30.0,
        "max_brake": 6.0,
    },
    "pid": {
        "lat_kp": 1.2,
        "lat_ki": 0.0,
        "lat_kd": 0.2,
        "lon_kp": 1.0,
        "lon_ki": 0.05,
        "lon_kd": 0.0,
        "dt": 0.1,
        "dt_wp": 0.1,
        "min_speed": 0.4,
        "overshoot": 1.2,
        "integral_limit": 5.0,
    },
    "collect": {
        "max_ticks": 600,
        "stop_streak": 50,
        "stop_keep_every": 10,
        "rdp_epsilon": 0.5,
    },
    "train": {
        "epochs": 16,
        "batch_size": 32,
        "lr": 1e-4,
        "weight_decay": 0.1,
        "clip_norm": 1.0,
        "decay_frac": 0.9,
        "decay_factor": 0.1,
        "seed": 0,
    },
    "eval": {
        "max_ticks": 600,
        "blocked_ticks": 200,
        "blocked_speed": 0.1,
        "collision_penalty": 0.6,
        "red_light_penalty": 0.7,
        "deviation_m": 7.5,
    },
    "rfds": {
        "source": "attention",
    },
}


def canonical_json(data) -> str:
    """Stable serialization: sorted keys, no whitespace variance."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(data) -> str:
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()[:12]


def parse_set(expr: str) -> tuple[list[str], object]:
    """Split ``a.b.c=value``; the value parses as JSON, else stays a string."""
    if "=" not in expr:
        raise ConfigError(f"override {expr!r} must look like key.path=value")
    path, _, raw = expr.partition("=")
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {expr!r} has an empty key path")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def _apply_one(tree: dict, keys: list[str], value, source: str) -> None:
    node = tree
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys)!r} (from {source})")
        node = node[key]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {'.'.join(keys)!r} (from {source})")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key {'.'.join(keys)!r} is a section, not a value")
    node[leaf] = value


def _merge_file(tree: dict, data: dict, prefix: str = "") -> None:
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in tree:
            raise ConfigError(f"unknown config key {path!r} (from config file)")
        if isinstance(tree[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a section")
            _merge_file(tree[key], value, prefix=path + ".")
        else:
            tree[key] = value


@dataclass
class RunConfig:
    raw: dict
    overrides: list[str]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def hash(self) -> str:
        return config_hash(self.raw)

    def provenance(self) -> dict:
        """Stamp embedded in every output artifact."""
        return {
            "config_hash": self.hash(),
            "seed": self.seed,
            "overrides": list(self.overrides),
        }

    # typed accessors; imports are local to keep module loading acyclic

    def fov_cfg(self):
        from .geom import FovConfig

        return FovConfig(**self.raw["fov"])

    def model_cfg(self):
        from .model import PlanTConfig

        return PlanTConfig(**self.raw["model"])

    def expert_cfg(self):
        from .pilot import ExpertConfig

        return ExpertConfig(**self.raw["expert"])

    def pid_cfg(self):
        from .pilot import PidConfig

        return PidConfig(**self.raw["pid"])

    def train_cfg(self):
        from .train import TrainConfig

        return TrainConfig(**self.raw["train"])

    def collect_cfg(self):
        from .train import CollectConfig

        return CollectConfig(
            fov=self.fov_cfg(),
            expert=self.expert_cfg(),
            pid=self.pid_cfg(),
            n_s=int(self.raw["model"]["n_s"]),
            l_max=float(self.raw["model"]["l_max"]),
            rdp_epsilon=float(self.raw["collect"]["rdp_epsilon"]),
            max_ticks=int(self.raw["collect"]["max_ticks"]),
            stop_streak=int(self.raw["collect"]["stop_streak"]),
            stop_keep_every=int(self.raw["collect"]["stop_keep_every"]),
        )

    def eval_cfg(self):
        from .eval import EvalConfig

        return EvalConfig(**self.raw["eval"])


def load_run_config(
    path: str | None = None,
    sets: list[str] | None = None,
    env: dict | None = None,
) -> RunConfig:
    """Defaults, then config file, then --set overrides, then PLANTKIT_SEED."""
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _merge_file(tree, data)
    sets = sets or []
    for expr in sets:
        keys, value = parse_set(expr)
        _apply_one(tree, keys, value, source="--set")
    env = os.environ if env is None else env
    if "PLANTKIT_SEED" in env:
        try:
            tree["seed"] = int(env["PLANTKIT_SEED"])
        except ValueError:
            raise ConfigError(f"PLANTKIT_SEED must be an integer, got {env['PLANTKIT_SEED']!r}")
    cfg = RunConfig(raw=tree, overrides=list(sets))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    try:
        cfg.fov_cfg()
        cfg.model_cfg()
        cfg.expert_cfg()
        cfg.pid_cfg()
        cfg.train_cfg()
        cfg.eval_cfg()
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if cfg.raw["suite"] not in ("starter", "training", "smoke"):
        raise ConfigError(f"unknown suite {cfg.raw['suite']!r}")
