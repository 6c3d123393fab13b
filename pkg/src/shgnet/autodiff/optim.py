"""Gradient clipping and the AdamW optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0
                     ) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``.

    Returns:
        The (possibly) scaled gradients and the norm observed before scaling.
    """
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [(g * scale).astype(g.dtype) for g in grads], norm


@dataclass
class OptimizerState:
    """Moment estimates and step counter of an AdamW optimizer."""

    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                 t: int, lr: float, weight_decay: float, beta1: float, beta2: float,
                 eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam step with decoupled weight decay.

    ``t`` is the step number after incrementing (the first step uses t=1).
    Returns the new parameter, first moment and second moment.
    """
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new = theta - lr * weight_decay * theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(theta.dtype), m.astype(theta.dtype), v.astype(theta.dtype)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
               state: OptimizerState, names: Sequence[str] | None = None) -> None:
    """Apply one AdamW step in place to every parameter with ``requires_grad``.

    Parameters flagged ``requires_grad=False`` (frozen) are skipped entirely:
    no decay, no moment update.
    """
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    names = list(names) if names is not None else [p.name or str(i) for i, p in enumerate(params)]
    state.t += 1
    for name, p, g in zip(names, params, grads):
        if not p.requires_grad:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        p.data[...], state.m[name], state.v[name] = adamw_update(
            p.data, g, m, v, state.t, state.lr, state.weight_decay,
            state.beta1, state.beta2, state.eps)


class AdamW:
    """Convenience wrapper binding an :class:`OptimizerState` to named parameters."""

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float = 1e-4,
                 weight_decay: float = 0.01, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.named = list(named_params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay,
                                    beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def params(self) -> list[Tensor]:
        return [p for _, p in self.named]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adamw_step(self.params, grads, self.state, [n for n, _ in self.named])
