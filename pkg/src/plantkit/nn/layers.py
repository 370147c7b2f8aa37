"""Neural layers used by the planner: affine maps, layer norm, attention, GRU.

All layers are pure functions of (inputs, parameter tensors); parameters
live in a :class:`~plantkit.nn.optim.ParamStore` owned by the caller.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, concat, softmax


class ConfigError(ValueError):
    """Raised for invalid layer configuration (e.g. head count)."""


def trunc_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, std) samples clipped to two standard deviations."""
    values = rng.standard_normal(shape) * std
    return np.clip(values, -2.0 * std, 2.0 * std)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ W + b with explicit shape checking."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if weight.shape[1] != bias.shape[-1]:
        raise ShapeError(f"linear: weight {weight.shape} vs bias {bias.shape}")
    if x.ndim > 2:
        # fold leading axes into one GEMM; per-sample batched matmul is
        # an order of magnitude slower for the small matrices used here
        lead = x.shape[:-1]
        folded = x.reshape((-1, x.shape[-1])) @ weight + bias
        return folded.reshape(lead + (weight.shape[1],))
    return x @ weight + bias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF via erf."""
    return x * 0.5 * ((x / np.sqrt(2.0)).erf() + 1.0)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when p == 0 or no rng (eval mode)."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def multi_head_self_attention(
    x: Tensor,
    heads: int,
    params: dict[str, Tensor],
    key_mask: np.ndarray | None = None,
    drop_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention with an output projection.

    Args:
        x: (..., n, H) token embeddings.
        heads: head count; H must be divisible by it.
        params: q_w/q_b/k_w/k_b/v_w/v_b/o_w/o_b tensors.
        key_mask: optional (..., n) boolean array, True where the key
            position is real; masked columns get -inf attention logits.
        drop_p, rng: attention-weight dropout (training only).

    Returns:
        (output (..., n, H), attention weights (..., heads, n, n)).
    """
    hidden = x.shape[-1]
    if hidden % heads != 0:
        raise ConfigError(f"hidden size {hidden} not divisible by {heads} heads")
    d_head = hidden // heads
    n = x.shape[-2]
    lead = x.shape[:-2]

    def split(t: Tensor) -> Tensor:
        # (..., n, H) -> (..., heads, n, d_head)
        t = t.reshape(lead + (n, heads, d_head))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return t.transpose(axes)

    q = split(linear(x, params["q_w"], params["q_b"]))
    k = split(linear(x, params["k_w"], params["k_b"]))
    v = split(linear(x, params["v_w"], params["v_b"]))

    logits = (q @ k.swap_last()) / np.sqrt(d_head)
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, -1e9)
        bias = bias.reshape(lead + (1, 1, n))
        logits = logits + bias
    attn = softmax(logits, axis=-1)
    mixed = dropout(attn, drop_p, rng) @ v

    # (..., heads, n, d_head) -> (..., n, H)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    mixed = mixed.transpose(axes).reshape(lead + (n, hidden))
    out = linear(mixed, params["o_w"], params["o_b"])
    return out, attn


def gru_cell(x: Tensor, h: Tensor, params: dict[str, Tensor]) -> Tensor:
    """One GRU step: reset/update gates plus tanh candidate.

    h' = (1 - z) * candidate + z * h, so an update gate saturated at 1
    carries the hidden state through unchanged.
    """
    if x.shape[-1] != params["w_r"].shape[0]:
        raise ShapeError(f"gru_cell: input {x.shape} vs w_r {params['w_r'].shape}")
    if h.shape[-1] != params["u_r"].shape[0]:
        raise ShapeError(f"gru_cell: hidden {h.shape} vs u_r {params['u_r'].shape}")
    r = (x @ params["w_r"] + h @ params["u_r"] + params["b_r"]).sigmoid()
    z = (x @ params["w_z"] + h @ params["u_z"] + params["b_z"]).sigmoid()
    candidate = (x @ params["w_n"] + r * (h @ params["u_n"]) + params["b_n"]).tanh()
    return (1.0 - z) * candidate + z * h


__all__ = [
    "ConfigError",
    "concat",
    "dropout",
    "gelu",
    "gru_cell",
    "layer_norm",
    "linear",
    "multi_head_self_attention",
    "trunc_normal",
]
