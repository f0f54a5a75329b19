"""Adam, global-norm gradient clipping and the plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractError("Adam betas must lie strictly inside (0, 1)")
        if self.epsilon <= 0.0:
            raise ContractError("Adam epsilon must be positive")


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without a gradient entry (or with ``None``) are treated as
    having a zero gradient: their moments still decay.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    step_size = state.learning_rate / correction1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ContractError(f"moment for {name} does not match the parameter size")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        denom = np.sqrt(v / correction2) + state.epsilon
        p.data -= (step_size * m / denom).astype(p.data.dtype)
    return params, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * scale
    return total


@dataclass
class LrSchedule:
    """Multiply the learning rate by ``decay_factor`` whenever dev loss fails to improve."""

    current_lr: float
    min_lr: float
    decay_factor: float = 0.7
    best_dev_loss: float = math.inf

    def __post_init__(self):
        if self.current_lr < 0:
            raise ContractError("learning rate must be non-negative")
        if not 0.0 < self.decay_factor < 1.0:
            raise ContractError("decay_factor must lie in (0, 1)")


def lr_plateau_step(sched: LrSchedule, dev_loss: float) -> tuple[float, bool]:
    """Update ``sched`` with one epoch's dev loss; return ``(lr, stop)``."""
    if sched.current_lr < sched.min_lr:
        return sched.current_lr, True
    if dev_loss < sched.best_dev_loss:
        sched.best_dev_loss = dev_loss
    else:
        sched.current_lr *= sched.decay_factor
    return sched.current_lr, sched.current_lr < sched.min_lr
