"""Small helpers shared by the MLM, GED and GEC training loops."""

from __future__ import annotations

import numpy as np

from .optim import AdamState, adam_step, clip_grad_norm
from .tensor import Tensor


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {name: p.grad for name, p in params.items()}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def optimizer_step(params: dict[str, Tensor], state: AdamState, clip_norm: float | None) -> float:
    """Clip, apply Adam, clear gradients.  Returns the pre-clip gradient norm."""
    grads = collect_grads(params)
    norm = clip_grad_norm(grads, clip_norm) if clip_norm else 0.0
    adam_step(params, grads, state)
    zero_grads(params)
    return norm


def pad_batch(seqs: list[list[int]], pad: int = 0) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
