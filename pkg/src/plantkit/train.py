"""Dataset generation with the expert, JSONL persistence, and training.

Collection drives each scenario closed-loop with the privileged expert,
recording one frame per tick: the tokenized scene, the light flag, the
ego's actual future positions as waypoint labels, and each vehicle
token's attributes one tick ahead as classification targets. Training
runs AdamW over padded batches with gradient clipping and a step
learning-rate decay, deterministically for a given seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import canonical_json, config_hash
from .geom import (
    FovConfig,
    ObjectToken,
    Pose2,
    TokenKind,
    points_to_ego_frame,
    tokenize_scene,
)
from .model import (
    LIGHT_FLAG,
    PlanTConfig,
    forward_batch,
    init_params,
    normalize_attributes,
    param_shapes,
    quantize_attributes,
)
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn.optim import ParamStore, adamw_step, clip_grad_norm
from .nn.tensor import Tensor, log_softmax
from .pilot import ExpertConfig, PidConfig, PidController, expert_decide, forecast_privileged
from .sim.maps import Scenario, ScenarioSpec, build_scenario
from .sim.world import detect_collisions, route_progress, step_world

FRAME_SCHEMA = "plantkit-frame-v1"
DATASET_SCHEMA = "plantkit-dataset-v1"


class TrainAbortError(RuntimeError):
    """Raised when the loss goes non-finite; the batch is persisted first."""


class CheckpointIncompatibleError(RuntimeError):
    """Checkpoint tensor shapes do not match the model configuration."""


# -- frame format -----------------------------------------------------------


@dataclass
class Frame:
    tick: int
    tokens: list[ObjectToken]
    light: str
    gt_waypoints: np.ndarray                 # (W, 2) ego frame
    gt_next_attributes: dict[str, np.ndarray]  # source_id -> 6 raw attributes
    ego_pose: Pose2

    def to_json(self) -> dict:
        return {
            "tick": self.tick,
            "light": self.light,
            "ego_pose": [self.ego_pose.x, self.ego_pose.y, self.ego_pose.yaw],
            "tokens": [_token_to_json(t) for t in self.tokens],
            "gt_waypoints": np.asarray(self.gt_waypoints).tolist(),
            "gt_next": {k: np.asarray(v).tolist() for k, v in sorted(self.gt_next_attributes.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "Frame":
        px, py, pyaw = data["ego_pose"]
        return cls(
            tick=int(data["tick"]),
            tokens=[_token_from_json(t) for t in data["tokens"]],
            light=data["light"],
            gt_waypoints=np.asarray(data["gt_waypoints"], dtype=np.float64),
            gt_next_attributes={
                k: np.asarray(v, dtype=np.float64) for k, v in data["gt_next"].items()
            },
            ego_pose=Pose2(px, py, pyaw),
        )


def _token_to_json(tok: ObjectToken) -> dict:
    data = {
        "kind": "vehicle" if tok.kind is TokenKind.VEHICLE else "route",
        "z": tok.z, "x": tok.x, "y": tok.y, "yaw": tok.yaw, "w": tok.w, "h": tok.h,
    }
    if tok.source_id is not None:
        data["id"] = tok.source_id
    return data


def _token_from_json(data: dict) -> ObjectToken:
    kind = TokenKind.VEHICLE if data["kind"] == "vehicle" else TokenKind.ROUTE_SEGMENT
    return ObjectToken(
        kind=kind, z=data["z"], x=data["x"], y=data["y"],
        yaw=data["yaw"], w=data["w"], h=data["h"], source_id=data.get("id"),
    )


@dataclass
class EpisodeRecord:
    name: str
    seed: int
    archetype: str
    status: str                    # ok | collision | blocked | timeout
    n_frames: int
    path: str

    def to_json(self) -> dict:
        return {
            "name": self.name, "seed": self.seed, "archetype": self.archetype,
            "status": self.status, "n_frames": self.n_frames, "path": self.path,
        }


@dataclass
class DatasetManifest:
    schema: str
    config_hash: str
    episodes: list[EpisodeRecord]
    n_frames: int

    def to_json(self) -> dict:
        return {
            "schema": self.schema,
            "config_hash": self.config_hash,
            "episodes": [e.to_json() for e in self.episodes],
            "n_frames": self.n_frames,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetManifest":
        return cls(
            schema=data["schema"],
            config_hash=data["config_hash"],
            episodes=[EpisodeRecord(**e) for e in data["episodes"]],
            n_frames=int(data["n_frames"]),
        )


# -- collection -------------------------------------------------------------


@dataclass
class CollectConfig:
    fov: FovConfig = field(default_factory=FovConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    pid: PidConfig = field(default_factory=PidConfig)
    n_s: int = 2
    l_max: float = 10.0
    rdp_epsilon: float = 0.5
    max_ticks: int = 600
    stop_streak: int = 50
    stop_keep_every: int = 10

    def to_json(self) -> dict:
        return {
            "fov": dict(vars(self.fov)),
            "expert": dict(vars(self.expert)),
            "pid": dict(vars(self.pid)),
            "n_s": self.n_s,
            "l_max": self.l_max,
            "rdp_epsilon": self.rdp_epsilon,
            "max_ticks": self.max_ticks,
            "stop_streak": self.stop_streak,
            "stop_keep_every": self.stop_keep_every,
        }


def run_expert_episode(
    scenario: Scenario, cfg: CollectConfig
) -> tuple[list[Frame], str]:
    """Drive one scenario with the expert; return labeled frames and status.

    The last W ticks carry no full future and are dropped. Frames deep in
    stopped stretches are thinned per the collection config.
    """
    world = scenario.world
    ego_id = scenario.ego_id
    expert_cfg = ExpertConfig(**{**vars(cfg.expert), "cruise_speed": scenario.target_speed})
    controller = PidController(cfg.pid)
    W = expert_cfg.n_waypoints

    raw: list[dict] = []
    status = "timeout"
    blocked_run = 0
    for _ in range(cfg.max_ticks):
        ego = world.vehicle(ego_id)
        tokens, light = tokenize_scene(
            world, ego_id, cfg.fov, n_s=cfg.n_s, l_max=cfg.l_max, rdp_epsilon=cfg.rdp_epsilon
        )
        raw.append(
            {"tick": world.tick, "tokens": tokens, "light": light,
             "pose": ego.pose, "speed": ego.speed}
        )
        forecast = forecast_privileged(world, expert_cfg.horizon)
        _, plan = expert_decide(world, ego_id, forecast, cfg=expert_cfg)
        controls = controller.pid_control(plan, ego.speed)
        step_world(world, controls)

        if any(ego_id in pair for pair in detect_collisions(world)):
            status = "collision"
            break
        blocked_run = blocked_run + 1 if world.vehicle(ego_id).speed < 0.1 else 0
        if blocked_run >= 2000:  # generous guard; labeling does not need eval's rule
            status = "blocked"
            break
        if route_progress(world.vehicle(ego_id)) >= 0.995:
            status = "ok"
            break

    frames: list[Frame] = []
    for t in range(max(len(raw) - W, 0)):
        rec = raw[t]
        future = np.array(
            [[raw[t + i]["pose"].x, raw[t + i]["pose"].y] for i in range(1, W + 1)]
        )
        gt_wp = points_to_ego_frame(rec["pose"], future)
        next_ids = {
            tok.source_id: tok for tok in raw[t + 1]["tokens"]
            if tok.kind is TokenKind.VEHICLE
        }
        gt_next = {
            tok.source_id: next_ids[tok.source_id].attributes()
            for tok in rec["tokens"]
            if tok.kind is TokenKind.VEHICLE and tok.source_id in next_ids
        }
        frames.append(
            Frame(
                tick=rec["tick"], tokens=rec["tokens"], light=rec["light"],
                gt_waypoints=gt_wp, gt_next_attributes=gt_next, ego_pose=rec["pose"],
            )
        )
    speeds = [raw[t]["speed"] for t in range(len(frames))]
    frames = _thin_stopped(frames, speeds, cfg.stop_streak, cfg.stop_keep_every)
    return frames, status


def _thin_stopped(
    frames: list[Frame], speeds: list[float], streak: int, keep_every: int
) -> list[Frame]:
    """Keep the first `streak` frames of each stopped stretch, then 1 in N."""
    kept = []
    run = 0
    for frame, speed in zip(frames, speeds):
        if speed < 0.05:
            run += 1
            if run > streak and (run - streak) % keep_every != 0:
                continue
        else:
            run = 0
        kept.append(frame)
    return kept


def _collect_one(task: tuple[ScenarioSpec, CollectConfig]):
    spec, cfg = task
    scenario = build_scenario(spec)
    return run_expert_episode(scenario, cfg)


def collect_dataset(
    specs: list[ScenarioSpec], cfg: CollectConfig, out_dir: str | Path, jobs: int = 1
) -> DatasetManifest:
    """Run the expert over every scenario, writing one JSONL shard each."""
    out_dir = Path(out_dir)
    shard_dir = out_dir / "episodes"
    shard_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg.to_json())

    tasks = [(spec, cfg) for spec in specs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_collect_one, tasks))
    else:
        results = [_collect_one(t) for t in tasks]

    episodes = []
    total = 0
    for spec, (frames, status) in zip(specs, results):
        if status != "ok":
            frames = []
        shard_path = shard_dir / f"{spec.name}.jsonl"
        with open(shard_path, "w") as fh:
            header = {
                "schema": FRAME_SCHEMA, "scenario": spec.to_json(),
                "config_hash": cfg_hash, "status": status,
            }
            fh.write(canonical_json(header) + "\n")
            for frame in frames:
                fh.write(canonical_json(frame.to_json()) + "\n")
        episodes.append(
            EpisodeRecord(
                name=spec.name, seed=spec.seed, archetype=spec.archetype,
                status=status, n_frames=len(frames),
                path=str(shard_path.relative_to(out_dir)),
            )
        )
        total += len(frames)
    manifest = DatasetManifest(
        schema=DATASET_SCHEMA, config_hash=cfg_hash, episodes=episodes, n_frames=total
    )
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(out_dir: str | Path) -> tuple[list[Frame], DatasetManifest]:
    """Read every ok-status shard listed by the manifest."""
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.json") as fh:
        manifest = DatasetManifest.from_json(json.load(fh))
    frames = []
    for episode in manifest.episodes:
        if episode.status != "ok":
            continue
        with open(out_dir / episode.path) as fh:
            header = json.loads(fh.readline())
            if header.get("schema") != FRAME_SCHEMA:
                raise ValueError(
                    f"shard {episode.path}: schema {header.get('schema')!r} != {FRAME_SCHEMA}"
                )
            for line in fh:
                frames.append(Frame.from_json(json.loads(line)))
    return frames, manifest


# -- batching ---------------------------------------------------------------


@dataclass
class BatchArrays:
    """Whole dataset pre-padded once; batches are row slices."""

    features: np.ndarray   # (N, n_max, 6) normalized
    kinds: np.ndarray      # (N, n_max) 1.0 vehicle / 0.0 route or pad
    mask: np.ndarray       # (N, n_max) bool, True at real tokens
    lights: np.ndarray     # (N,)
    gt_waypoints: np.ndarray  # (N, W, 2)
    aux_targets: np.ndarray   # (N, n_max, 6) int bins
    aux_mask: np.ndarray      # (N, n_max) bool, True at labeled vehicle tokens
    veh_counts: np.ndarray    # (N,) labeled vehicles per frame

    def __len__(self) -> int:
        return self.features.shape[0]


def build_batch_arrays(frames: list[Frame], cfg: PlanTConfig) -> BatchArrays:
    N = len(frames)
    n_max = max((len(f.tokens) for f in frames), default=cfg.n_s)
    features = np.zeros((N, n_max, 6))
    kinds = np.zeros((N, n_max))
    mask = np.zeros((N, n_max), dtype=bool)
    lights = np.zeros(N)
    W = cfg.n_waypoints
    gt_wp = np.zeros((N, W, 2))
    aux_targets = np.zeros((N, n_max, 6), dtype=np.int64)
    aux_mask = np.zeros((N, n_max), dtype=bool)

    for i, frame in enumerate(frames):
        n = len(frame.tokens)
        if n:
            features[i, :n] = normalize_attributes(frame.tokens, cfg)
            kinds[i, :n] = [
                1.0 if t.kind is TokenKind.VEHICLE else 0.0 for t in frame.tokens
            ]
            mask[i, :n] = True
        lights[i] = LIGHT_FLAG[frame.light]
        gt_wp[i] = frame.gt_waypoints[:W]
        for j, tok in enumerate(frame.tokens):
            if tok.kind is TokenKind.VEHICLE and tok.source_id in frame.gt_next_attributes:
                aux_targets[i, j] = quantize_attributes(
                    frame.gt_next_attributes[tok.source_id], cfg
                )
                aux_mask[i, j] = True
    veh_counts = aux_mask.sum(axis=1)
    return BatchArrays(
        features=features, kinds=kinds, mask=mask, lights=lights,
        gt_waypoints=gt_wp, aux_targets=aux_targets, aux_mask=aux_mask,
        veh_counts=veh_counts,
    )


def batch_loss(
    params: ParamStore,
    cfg: PlanTConfig,
    batch: BatchArrays,
    rows: np.ndarray,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, float, float]:
    """Mean per-frame loss over the selected rows.

    Per frame: mean-over-W L1 waypoint distance plus
    aux_weight / V * sum of per-attribute cross-entropies over that
    frame's labeled vehicles.
    """
    B = len(rows)
    waypoints, aux_logits, _ = forward_batch(
        batch.features[rows], batch.kinds[rows], batch.mask[rows],
        batch.lights[rows], params, cfg, rng=rng,
    )
    diff = waypoints - batch.gt_waypoints[rows]
    wp_term = diff.abs().sum() * (1.0 / (cfg.n_waypoints * B))

    sel = np.nonzero(batch.aux_mask[rows])
    veh_term = Tensor(np.zeros(()))
    if sel[0].size and cfg.aux_weight > 0:
        counts = batch.veh_counts[rows]
        weights = cfg.aux_weight / (counts[sel[0]] * B)
        targets = batch.aux_targets[rows][sel]
        for a in range(6):
            log_probs = log_softmax(aux_logits[a][sel], axis=-1)
            picked = log_probs[np.arange(sel[0].size), targets[:, a]]
            veh_term = veh_term + (picked * weights).sum() * -1.0
    total = wp_term + veh_term
    return total, float(wp_term.data), float(veh_term.data)


# -- training loop ----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 16
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    decay_frac: float = 0.9
    decay_factor: float = 0.1
    seed: int = 0

    def to_json(self) -> dict:
        return vars(self).copy()


@dataclass
class TrainResult:
    params: ParamStore
    history: list[dict]
    checkpoint_path: str | None


def train(
    frames: list[Frame],
    model_cfg: PlanTConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    params: ParamStore | None = None,
    log=None,
) -> TrainResult:
    """Deterministic AdamW training; writes checkpoint + model card if out_dir."""
    if not frames:
        raise ValueError("training needs a non-empty dataset")
    batch = build_batch_arrays(frames, model_cfg)
    init_rng = np.random.default_rng(train_cfg.seed)
    if params is None:
        params = init_params(model_cfg, init_rng)
    shuffle_rng = np.random.default_rng(train_cfg.seed + 1)

    N = len(batch)
    decay_at = math.ceil(train_cfg.decay_frac * train_cfg.epochs)
    history = []
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr * (train_cfg.decay_factor if epoch >= decay_at else 1.0)
        order = shuffle_rng.permutation(N)
        wp_sum = veh_sum = 0.0
        n_batches = 0
        for start in range(0, N, train_cfg.batch_size):
            rows = order[start:start + train_cfg.batch_size]
            params.zero_grad()
            total, wp_val, veh_val = batch_loss(params, model_cfg, batch, rows)
            if not math.isfinite(float(total.data)):
                _persist_abort(out_dir, epoch, rows)
                raise TrainAbortError(
                    f"non-finite loss at epoch {epoch}, batch rows {rows[:4].tolist()}..."
                )
            total.backward()
            clip_grad_norm(params, train_cfg.clip_norm)
            adamw_step(params, lr=lr, weight_decay=train_cfg.weight_decay)
            wp_sum += wp_val
            veh_sum += veh_val
            n_batches += 1
        entry = {
            "epoch": epoch,
            "lr": lr,
            "waypoint_loss": wp_sum / n_batches,
            "vehicle_loss": veh_sum / n_batches,
        }
        history.append(entry)
        if log:
            log(
                f"epoch {epoch:3d}  lr {lr:.1e}  "
                f"wp {entry['waypoint_loss']:.4f}  veh {entry['vehicle_loss']:.4f}"
            )
        if out_dir is not None:
            out_path = Path(out_dir)
            out_path.mkdir(parents=True, exist_ok=True)
            save_model_checkpoint(params, model_cfg, out_path / "last.ckpt", extra={
                "train": train_cfg.to_json(), "epoch": epoch,
            })

    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = str(out_dir / "model.ckpt")
        save_model_checkpoint(params, model_cfg, checkpoint_path, extra={
            "train": train_cfg.to_json(), "n_frames": N,
        })
        card = {
            "model": model_cfg.to_json(),
            "train": train_cfg.to_json(),
            "n_frames": N,
            "history": history,
        }
        with open(out_dir / "model_card.json", "w") as fh:
            json.dump(card, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return TrainResult(params=params, history=history, checkpoint_path=checkpoint_path)


def _persist_abort(out_dir, epoch: int, rows: np.ndarray) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "abort.json", "w") as fh:
        json.dump({"epoch": epoch, "batch_rows": rows.tolist()}, fh, sort_keys=True)
        fh.write("\n")


# -- model checkpoints ------------------------------------------------------


def save_model_checkpoint(
    params: ParamStore, cfg: PlanTConfig, path: str | Path, extra: dict | None = None
) -> None:
    meta = {"model": cfg.to_json()}
    if extra:
        meta.update(extra)
    save_checkpoint(params, path, meta=meta)


def load_model_checkpoint(path: str | Path) -> tuple[ParamStore, PlanTConfig, dict]:
    """Load and validate a checkpoint against its stored configuration."""
    store, meta = load_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: missing model config in checkpoint meta")
    cfg = PlanTConfig.from_json(meta["model"])
    validate_param_shapes(store, cfg)
    return store, cfg, meta


def validate_param_shapes(store: ParamStore, cfg: PlanTConfig) -> None:
    expected = param_shapes(cfg)
    for name in sorted(expected):
        if name not in store.params:
            raise CheckpointIncompatibleError(f"missing parameter {name!r}")
        got = store.params[name].data.shape
        if tuple(got) != expected[name]:
            raise CheckpointIncompatibleError(
                f"parameter {name!r} has shape {tuple(got)}, config expects {expected[name]}"
            )
    surplus = set(store.params) - set(expected)
    if surplus:
        raise CheckpointIncompatibleError(f"unexpected parameters {sorted(surplus)[:3]}")
