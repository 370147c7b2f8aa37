"""Parameter storage, gradient clipping, and the AdamW update."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Named learnable tensors plus Adam moment buffers and a step counter."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        tensor.grad = np.zeros_like(tensor.data)
        self.params[name] = tensor
        self.moment1[name] = np.zeros_like(tensor.data)
        self.moment2[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        # Parameters keep zero arrays (never None) so that parameters not
        # reached by a given loss still report a well-defined zero gradient.
        for tensor in self.params.values():
            tensor.grad[...] = 0.0

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "ParamStore":
        clone = ParamStore()
        for name, tensor in self.params.items():
            clone.add(name, tensor.data.copy())
            clone.moment1[name] = self.moment1[name].copy()
            clone.moment2[name] = self.moment2[name].copy()
        clone.step_count = self.step_count
        return clone

    def frozen(self) -> "ParamStore":
        """Grad-free snapshot for concurrent inference."""
        clone = ParamStore()
        for name, tensor in self.params.items():
            clone.add(name, tensor.data.copy())
        clone.step_count = self.step_count
        return clone


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for tensor in store.params.values():
        if tensor.grad is not None:
            total += float(np.sum(tensor.grad * tensor.grad))
    return float(np.sqrt(total))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns the applied scale factor (1.0 when no clipping happened).
    """
    norm = global_grad_norm(store)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for tensor in store.params.values():
        if tensor.grad is not None:
            tensor.grad *= scale
    return scale


def adamw_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Decoupled-weight-decay Adam with bias correction.

    Parameters without a gradient are skipped entirely (no decay either),
    so a zero-grad/zero-decay step leaves the store unchanged.
    """
    beta1, beta2 = betas
    store.step_count += 1
    t = store.step_count
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, tensor in store.params.items():
        grad = tensor.grad
        if grad is None:
            continue
        m = store.moment1[name]
        v = store.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        if weight_decay:
            tensor.data -= lr * weight_decay * tensor.data
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
