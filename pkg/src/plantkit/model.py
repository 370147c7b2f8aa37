"""Object-token planner network.

A linear projection plus type embeddings turns each 6-attribute token
into a hidden vector; a post-norm transformer encoder with a CLS token
mixes them; a GRU head seeded with [CLS output; light flag] emits W
cumulative waypoint offsets; per-attribute linear heads classify each
vehicle token's next-tick attributes into uniform bins. The multi-task
loss is mean per-waypoint L1 plus a weighted cross-entropy sum.

Two forward paths exist: an autodiff path used for training and
gradient checks, and a plain-numpy mirror used in closed-loop rollouts
where no gradients are needed. They share parameters and match to
floating-point roundoff.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .geom import InvalidInputError, ObjectToken, TokenKind
from .nn.layers import (
    dropout,
    gelu,
    gru_cell,
    layer_norm,
    linear,
    multi_head_self_attention,
    trunc_normal,
)
from .nn.losses import cross_entropy, l1_loss
from .nn.optim import ParamStore
from .nn.tensor import Tensor, concat, stack


class LabelAlignmentError(ValueError):
    """Ground-truth vehicle ids do not match the frame's vehicle tokens."""


LIGHT_FLAG = {"green": 0.0, "red": 1.0}

ATTRIBUTE_NAMES = ("z", "x", "y", "yaw", "w", "h")


@dataclass
class PlanTConfig:
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    n_waypoints: int = 4
    z_pos: int = 128
    z_speed: int = 4
    z_yaw: int = 32
    z_ext: int = 32
    aux_weight: float = 0.2
    d_max: float = 30.0
    n_s: int = 2
    l_max: float = 10.0
    v_max: float = 15.0
    ext_max: float = 10.0
    dropout: float = 0.0

    def __post_init__(self):
        counts = (
            self.hidden, self.layers, self.heads, self.ffn_mult, self.n_waypoints,
            self.z_pos, self.z_speed, self.z_yaw, self.z_ext, self.n_s,
        )
        if any(c < 1 for c in counts):
            raise InvalidInputError("all model counts must be >= 1")
        if self.aux_weight < 0:
            raise InvalidInputError("aux_weight must be >= 0")
        if self.hidden % self.heads != 0:
            raise InvalidInputError("hidden size must divide evenly into heads")

    def bin_specs(self) -> tuple[tuple[int, float, float], ...]:
        """(bin count, low, high) per attribute in token order z,x,y,yaw,w,h."""
        return (
            (self.z_speed, 0.0, self.v_max),
            (self.z_pos, -self.d_max, self.d_max),
            (self.z_pos, -self.d_max, self.d_max),
            (self.z_yaw, 0.0, 2.0 * math.pi),
            (self.z_ext, 0.0, self.ext_max),
            (self.z_ext, 0.0, self.ext_max),
        )

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, data: dict) -> "PlanTConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


@dataclass
class RelevanceRanking:
    """Vehicle ids sorted by descending relevance with their scores."""

    order: list[str]
    scores: dict[str, float]

    def top1(self) -> str | None:
        return self.order[0] if self.order else None


@dataclass
class ModelOutput:
    waypoints: Tensor                  # (W, 2), ego frame meters
    aux_logits: list[Tensor]           # 6 tensors of shape (V, Z_a)
    vehicle_ids: list[str]
    attention: np.ndarray              # (layers, heads, n+1, n+1)
    token_kinds: list[TokenKind] = field(default_factory=list)


# -- parameters -------------------------------------------------------------


def init_params(cfg: PlanTConfig, rng: np.random.Generator) -> ParamStore:
    """Fresh parameters: truncated-normal weights, zero biases, unit LN gains."""
    store = ParamStore()
    H = cfg.hidden

    def w(name, shape):
        store.add(name, trunc_normal(shape, 0.02, rng))

    def zeros(name, shape):
        store.add(name, np.zeros(shape))

    def ones(name, shape):
        store.add(name, np.ones(shape))

    w("emb/rho_w", (6, H))
    zeros("emb/rho_b", (H,))
    w("emb/type_v", (H,))
    w("emb/type_s", (H,))
    w("emb/cls", (H,))

    for layer in range(cfg.layers):
        p = f"enc{layer}/"
        for gate in ("q", "k", "v", "o"):
            w(p + gate + "_w", (H, H))
            zeros(p + gate + "_b", (H,))
        ones(p + "ln1_g", (H,))
        zeros(p + "ln1_b", (H,))
        w(p + "ffn_w1", (H, cfg.ffn_mult * H))
        zeros(p + "ffn_b1", (cfg.ffn_mult * H,))
        w(p + "ffn_w2", (cfg.ffn_mult * H, H))
        zeros(p + "ffn_b2", (H,))
        ones(p + "ln2_g", (H,))
        zeros(p + "ln2_b", (H,))

    Hd = H + 1  # decoder hidden carries the light flag as an extra lane
    for gate in ("r", "z", "n"):
        w(f"dec/w_{gate}", (2, Hd))
        w(f"dec/u_{gate}", (Hd, Hd))
        zeros(f"dec/b_{gate}", (Hd,))
    w("dec/out_w", (Hd, 2))
    zeros("dec/out_b", (2,))

    for a, (bins, _, _) in enumerate(cfg.bin_specs()):
        w(f"aux{a}/w", (H, bins))
        zeros(f"aux{a}/b", (bins,))
    return store


def param_shapes(cfg: PlanTConfig) -> dict[str, tuple[int, ...]]:
    """Expected parameter shapes for a config, without allocating anything."""
    H = cfg.hidden
    Hd = H + 1
    shapes: dict[str, tuple[int, ...]] = {
        "emb/rho_w": (6, H), "emb/rho_b": (H,),
        "emb/type_v": (H,), "emb/type_s": (H,), "emb/cls": (H,),
    }
    for layer in range(cfg.layers):
        p = f"enc{layer}/"
        for gate in ("q", "k", "v", "o"):
            shapes[p + gate + "_w"] = (H, H)
            shapes[p + gate + "_b"] = (H,)
        shapes[p + "ln1_g"] = (H,)
        shapes[p + "ln1_b"] = (H,)
        shapes[p + "ffn_w1"] = (H, cfg.ffn_mult * H)
        shapes[p + "ffn_b1"] = (cfg.ffn_mult * H,)
        shapes[p + "ffn_w2"] = (cfg.ffn_mult * H, H)
        shapes[p + "ffn_b2"] = (H,)
        shapes[p + "ln2_g"] = (H,)
        shapes[p + "ln2_b"] = (H,)
    for gate in ("r", "z", "n"):
        shapes[f"dec/w_{gate}"] = (2, Hd)
        shapes[f"dec/u_{gate}"] = (Hd, Hd)
        shapes[f"dec/b_{gate}"] = (Hd,)
    shapes["dec/out_w"] = (Hd, 2)
    shapes["dec/out_b"] = (2,)
    for a, (bins, _, _) in enumerate(cfg.bin_specs()):
        shapes[f"aux{a}/w"] = (H, bins)
        shapes[f"aux{a}/b"] = (bins,)
    return shapes


# -- input preparation ------------------------------------------------------


def normalize_attributes(tokens: list[ObjectToken], cfg: PlanTConfig) -> np.ndarray:
    """Scale raw token attributes into roughly unit range before projection.

    Vehicle z (speed) is divided by v_max; the route ordering z is kept
    as its small raw integer. Positions shrink by d_max, yaw maps to
    [-1, 1) via yaw/pi - 1, extents shrink by ext_max.
    """
    out = np.zeros((len(tokens), 6))
    for i, tok in enumerate(tokens):
        z = tok.z / cfg.v_max if tok.kind is TokenKind.VEHICLE else tok.z
        out[i] = (
            z,
            tok.x / cfg.d_max,
            tok.y / cfg.d_max,
            tok.yaw / math.pi - 1.0,
            tok.w / cfg.ext_max,
            tok.h / cfg.ext_max,
        )
    if not np.isfinite(out).all():
        raise InvalidInputError("token attributes must be finite")
    return out


def quantize_attribute(value: float, attribute_index: int, cfg: PlanTConfig) -> int:
    """Uniform bin index for one attribute; attribute_index is 1-based."""
    if not 1 <= attribute_index <= 6:
        raise InvalidInputError(f"attribute_index {attribute_index} outside 1..6")
    if math.isnan(value):
        raise InvalidInputError("cannot quantize NaN")
    bins, lo, hi = cfg.bin_specs()[attribute_index - 1]
    idx = int(math.floor((value - lo) / (hi - lo) * bins))
    return min(max(idx, 0), bins - 1)


def quantize_attributes(values: np.ndarray, cfg: PlanTConfig) -> np.ndarray:
    """Vectorized :func:`quantize_attribute` over (..., 6) raw attributes."""
    values = np.asarray(values, dtype=np.float64)
    if np.isnan(values).any():
        raise InvalidInputError("cannot quantize NaN")
    out = np.empty(values.shape, dtype=np.int64)
    for a, (bins, lo, hi) in enumerate(cfg.bin_specs()):
        idx = np.floor((values[..., a] - lo) / (hi - lo) * bins).astype(np.int64)
        out[..., a] = np.clip(idx, 0, bins - 1)
    return out


# -- autodiff forward -------------------------------------------------------


def embed_tokens(tokens: list[ObjectToken], params: ParamStore, cfg: PlanTConfig) -> Tensor:
    """Rows: [CLS, projected token 1, ..., projected token n]."""
    p = params.params
    rows = [p["emb/cls"].reshape((1, cfg.hidden))]
    if tokens:
        feats = Tensor(normalize_attributes(tokens, cfg))
        projected = linear(feats, p["emb/rho_w"], p["emb/rho_b"])
        kinds = np.array(
            [1.0 if t.kind is TokenKind.VEHICLE else 0.0 for t in tokens]
        ).reshape(-1, 1)
        type_rows = (
            p["emb/type_v"].reshape((1, cfg.hidden)) * kinds
            + p["emb/type_s"].reshape((1, cfg.hidden)) * (1.0 - kinds)
        )
        rows.append(projected + type_rows)
    return concat(rows, axis=0)


def _encode(
    x: Tensor,
    params: ParamStore,
    cfg: PlanTConfig,
    key_mask: np.ndarray | None,
    rng: np.random.Generator | None,
) -> tuple[Tensor, list[Tensor]]:
    """Post-norm transformer encoder; returns output and per-layer attention."""
    p = params.params
    attn_maps = []
    for layer in range(cfg.layers):
        pre = f"enc{layer}/"
        attn_params = {k: p[pre + k] for k in
                       ("q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b")}
        mixed, attn = multi_head_self_attention(
            x, cfg.heads, attn_params, key_mask=key_mask, drop_p=cfg.dropout, rng=rng
        )
        mixed = dropout(mixed, cfg.dropout, rng)
        x = layer_norm(x + mixed, p[pre + "ln1_g"], p[pre + "ln1_b"])
        hidden = gelu(linear(x, p[pre + "ffn_w1"], p[pre + "ffn_b1"]))
        hidden = dropout(linear(hidden, p[pre + "ffn_w2"], p[pre + "ffn_b2"]), cfg.dropout, rng)
        x = layer_norm(x + hidden, p[pre + "ln2_g"], p[pre + "ln2_b"])
        attn_maps.append(attn)
    return x, attn_maps


def _decode_waypoints(cls_out: Tensor, light: Tensor, params: ParamStore, cfg: PlanTConfig) -> Tensor:
    """GRU rollout from [CLS; light]; emits cumulative waypoints, (..., W, 2)."""
    p = params.params
    gates = {
        f"{k}_{g}": p[f"dec/{k}_{g}"] for k in ("w", "u", "b") for g in ("r", "z", "n")
    }
    h = concat([cls_out, light], axis=-1)
    prev = Tensor(np.zeros(cls_out.shape[:-1] + (2,)))
    points = []
    for _ in range(cfg.n_waypoints):
        h = gru_cell(prev, h, gates)
        delta = linear(h, p["dec/out_w"], p["dec/out_b"])
        prev = prev + delta
        points.append(prev)
    return stack(points, axis=-2)


def forward(
    tokens: list[ObjectToken],
    light: str,
    params: ParamStore,
    cfg: PlanTConfig,
    rng: np.random.Generator | None = None,
) -> ModelOutput:
    """Full single-frame pass retaining attention maps and aux logits."""
    n_route = sum(1 for t in tokens if t.kind is TokenKind.ROUTE_SEGMENT)
    if n_route != cfg.n_s:
        raise InvalidInputError(f"expected {cfg.n_s} route tokens, got {n_route}")
    if light not in LIGHT_FLAG:
        raise InvalidInputError(f"light must be green or red, got {light!r}")

    x = embed_tokens(tokens, params, cfg)
    encoded, attn_maps = _encode(x, params, cfg, key_mask=None, rng=rng)
    cls_out = encoded[0].reshape((1, cfg.hidden))
    light_t = Tensor(np.array([[LIGHT_FLAG[light]]]))
    waypoints = _decode_waypoints(cls_out, light_t, params, cfg)[0]

    vehicle_rows = [i + 1 for i, t in enumerate(tokens) if t.kind is TokenKind.VEHICLE]
    vehicle_ids = [tokens[i - 1].source_id for i in vehicle_rows]
    aux_logits = []
    for a in range(6):
        head_w = params.params[f"aux{a}/w"]
        head_b = params.params[f"aux{a}/b"]
        if vehicle_rows:
            aux_logits.append(linear(encoded[vehicle_rows], head_w, head_b))
        else:
            aux_logits.append(Tensor(np.zeros((0, head_w.shape[1]))))

    attention = np.stack([a.data for a in attn_maps])  # (layers, heads, n+1, n+1)
    return ModelOutput(
        waypoints=waypoints,
        aux_logits=aux_logits,
        vehicle_ids=vehicle_ids,
        attention=attention,
        token_kinds=[t.kind for t in tokens],
    )


def forward_batch(
    features: np.ndarray,
    kinds: np.ndarray,
    mask: np.ndarray,
    lights: np.ndarray,
    params: ParamStore,
    cfg: PlanTConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor], Tensor]:
    """Padded-batch training pass.

    Args:
        features: (B, n, 6) pre-normalized attributes (zeros at padding).
        kinds: (B, n) 1.0 for vehicle tokens, 0.0 for route tokens/padding.
        mask: (B, n) True at real tokens.
        lights: (B,) light flags in {0.0, 1.0}.

    Returns:
        (waypoints (B, W, 2), aux logits per attribute (B, n, Z_a),
        encoded tokens (B, n+1, H)).
    """
    p = params.params
    B = features.shape[0]
    projected = linear(Tensor(features), p["emb/rho_w"], p["emb/rho_b"])
    type_rows = (
        p["emb/type_v"].reshape((1, 1, cfg.hidden)) * kinds[..., None]
        + p["emb/type_s"].reshape((1, 1, cfg.hidden)) * (1.0 - kinds[..., None])
    )
    cls_tile = p["emb/cls"].reshape((1, 1, cfg.hidden)) * np.ones((B, 1, 1))
    x = concat([cls_tile, projected + type_rows], axis=1)
    full_mask = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)

    encoded, _ = _encode(x, params, cfg, key_mask=full_mask, rng=rng)
    cls_out = encoded[:, 0]
    light_t = Tensor(lights.reshape(B, 1))
    waypoints = _decode_waypoints(cls_out, light_t, params, cfg)

    token_out = encoded[:, 1:]
    aux_logits = [
        linear(token_out, p[f"aux{a}/w"], p[f"aux{a}/b"]) for a in range(6)
    ]
    return waypoints, aux_logits, encoded


# -- loss -------------------------------------------------------------------


def compute_loss(
    out: ModelOutput,
    gt_waypoints: np.ndarray,
    gt_next_attributes: dict[str, np.ndarray],
    cfg: PlanTConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """Multi-task loss for one frame.

    ``gt_next_attributes`` maps vehicle source ids to raw 6-attribute
    vectors one tick ahead; vehicles without an entry are masked out of
    the vehicle term. Ids that match no token raise LabelAlignmentError.
    """
    wp_term = l1_loss(out.waypoints, np.asarray(gt_waypoints, dtype=np.float64))

    unknown = set(gt_next_attributes) - set(out.vehicle_ids)
    if unknown:
        raise LabelAlignmentError(f"labels reference unknown vehicle ids {sorted(unknown)}")
    labeled = [i for i, vid in enumerate(out.vehicle_ids) if vid in gt_next_attributes]
    if labeled and cfg.aux_weight > 0:
        veh_term = None
        for a in range(6):
            targets = [
                quantize_attribute(
                    float(gt_next_attributes[out.vehicle_ids[i]][a]), a + 1, cfg
                )
                for i in labeled
            ]
            ce = cross_entropy(out.aux_logits[a][labeled], np.array(targets))
            veh_term = ce if veh_term is None else veh_term + ce
        veh_term = veh_term * cfg.aux_weight
    else:
        veh_term = Tensor(np.zeros(()))
    total = wp_term + veh_term
    return total, wp_term, veh_term


# -- relevance --------------------------------------------------------------


def attention_relevance(out: ModelOutput, tokens: list[ObjectToken]) -> RelevanceRanking:
    """Rank vehicles by total CLS attention mass across layers and heads."""
    cls_rows = out.attention[:, :, 0, :]  # (layers, heads, n+1)
    summed = cls_rows.sum(axis=(0, 1))
    scores: dict[str, float] = {}
    for i, tok in enumerate(tokens):
        if tok.kind is TokenKind.VEHICLE:
            scores[tok.source_id] = float(summed[i + 1])
    order = sorted(scores, key=lambda vid: (-scores[vid], vid))
    return RelevanceRanking(order=order, scores=scores)


# -- inference mirror (no autodiff) -----------------------------------------


def _np_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def _np_softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _np_gelu(x):
    return x * 0.5 * (special.erf(x / np.sqrt(2.0)) + 1.0)


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def forward_numpy(
    tokens: list[ObjectToken],
    light: str,
    params: ParamStore,
    cfg: PlanTConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Inference-only mirror of :func:`forward`.

    Returns (waypoints (W, 2), attention (layers, heads, n+1, n+1));
    matches the autodiff path to numerical roundoff.
    """
    n_route = sum(1 for t in tokens if t.kind is TokenKind.ROUTE_SEGMENT)
    if n_route != cfg.n_s:
        raise InvalidInputError(f"expected {cfg.n_s} route tokens, got {n_route}")
    p = {k: t.data for k, t in params.params.items()}
    H = cfg.hidden
    heads = cfg.heads
    d_head = H // heads

    rows = [p["emb/cls"].reshape(1, H)]
    if tokens:
        feats = normalize_attributes(tokens, cfg)
        projected = feats @ p["emb/rho_w"] + p["emb/rho_b"]
        kinds = np.array(
            [1.0 if t.kind is TokenKind.VEHICLE else 0.0 for t in tokens]
        ).reshape(-1, 1)
        type_rows = p["emb/type_v"] * kinds + p["emb/type_s"] * (1.0 - kinds)
        rows.append(projected + type_rows)
    x = np.concatenate(rows, axis=0)
    n1 = x.shape[0]

    attn_all = np.empty((cfg.layers, heads, n1, n1))
    for layer in range(cfg.layers):
        pre = f"enc{layer}/"
        q = (x @ p[pre + "q_w"] + p[pre + "q_b"]).reshape(n1, heads, d_head).transpose(1, 0, 2)
        k = (x @ p[pre + "k_w"] + p[pre + "k_b"]).reshape(n1, heads, d_head).transpose(1, 0, 2)
        v = (x @ p[pre + "v_w"] + p[pre + "v_b"]).reshape(n1, heads, d_head).transpose(1, 0, 2)
        logits = q @ k.transpose(0, 2, 1) / np.sqrt(d_head)
        attn = _np_softmax(logits, axis=-1)
        attn_all[layer] = attn
        mixed = (attn @ v).transpose(1, 0, 2).reshape(n1, H)
        mixed = mixed @ p[pre + "o_w"] + p[pre + "o_b"]
        x = _np_layer_norm(x + mixed, p[pre + "ln1_g"], p[pre + "ln1_b"])
        hidden = _np_gelu(x @ p[pre + "ffn_w1"] + p[pre + "ffn_b1"])
        hidden = hidden @ p[pre + "ffn_w2"] + p[pre + "ffn_b2"]
        x = _np_layer_norm(x + hidden, p[pre + "ln2_g"], p[pre + "ln2_b"])

    h = np.concatenate([x[0], [LIGHT_FLAG[light]]])
    prev = np.zeros(2)
    waypoints = np.empty((cfg.n_waypoints, 2))
    for w in range(cfg.n_waypoints):
        r = _np_sigmoid(prev @ p["dec/w_r"] + h @ p["dec/u_r"] + p["dec/b_r"])
        zg = _np_sigmoid(prev @ p["dec/w_z"] + h @ p["dec/u_z"] + p["dec/b_z"])
        cand = np.tanh(prev @ p["dec/w_n"] + r * (h @ p["dec/u_n"]) + p["dec/b_n"])
        h = (1.0 - zg) * cand + zg * h
        prev = prev + (h @ p["dec/out_w"] + p["dec/out_b"])
        waypoints[w] = prev
    return waypoints, attn_all
