"""Pre-norm Transformer blocks shared by the MLM, the GEC encoder and the GEC decoder.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted paths such
as ``enc.layer2.self_attn.Wq``.  All forward functions work on padded id
batches of shape ``[batch, length]``; a 1-D id sequence is treated as a batch
of one and the batch axis is dropped again on the way out.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor
from .vocab import BOS, PAD

TransformerParams = dict[str, Tensor]


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 3
    n_dec_layers: int | None = None
    max_len: int = 64
    dropout_rate: float = 0.1
    positional: str = "sinusoidal"
    tie_embeddings: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        dims = (self.vocab_size, self.d_model, self.n_heads, self.d_ff, self.n_layers, self.max_len)
        if min(dims) <= 0 or (self.n_dec_layers is not None and self.n_dec_layers <= 0):
            raise ContractError(f"all transformer dimensions must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must lie in [0, 1)")
        if self.positional not in ("sinusoidal", "learned"):
            raise ContractError(f"unknown positional encoding {self.positional!r}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"unsupported dtype {self.dtype!r}")

    @property
    def decoder_layers(self) -> int:
        return self.n_dec_layers or self.n_layers

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def with_(self, **changes) -> "TransformerConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TransformerConfig":
        return cls(**d)


# Real-scale presets; the desk-scale defaults above are what the tests train.
TRANSFORMER_BIG = dict(d_model=1024, n_heads=16, d_ff=4096, n_layers=6, max_len=1024, dropout_rate=0.3)
BERT_BASE = dict(d_model=768, n_heads=12, d_ff=3072, n_layers=12, max_len=512, dropout_rate=0.1, positional="learned")


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def init_linear(params: TransformerParams, name: str, d_in: int, d_out: int, rng, dtype, bias: bool = True):
    params[f"{name}.W"] = _param(rng.normal(0.0, d_in**-0.5, (d_in, d_out)), dtype)
    if bias:
        params[f"{name}.b"] = _param(np.zeros(d_out), dtype)


def init_layer_norm(params: TransformerParams, name: str, d: int, dtype):
    params[f"{name}.g"] = _param(np.ones(d), dtype)
    params[f"{name}.b"] = _param(np.zeros(d), dtype)


def init_attention(params: TransformerParams, name: str, d: int, rng, dtype):
    for w in "qkvo":
        params[f"{name}.W{w}"] = _param(rng.normal(0.0, d**-0.5, (d, d)), dtype)
        params[f"{name}.b{w}"] = _param(np.zeros(d), dtype)


def init_ffn(params: TransformerParams, name: str, d: int, d_ff: int, rng, dtype):
    init_linear(params, f"{name}.fc1", d, d_ff, rng, dtype)
    init_linear(params, f"{name}.fc2", d_ff, d, rng, dtype)


def init_embeddings(params: TransformerParams, prefix: str, cfg: TransformerConfig, rng):
    dt = cfg.np_dtype
    params[f"{prefix}.embed"] = _param(rng.normal(0.0, cfg.d_model**-0.5, (cfg.vocab_size, cfg.d_model)), dt)
    if cfg.positional == "learned":
        params[f"{prefix}.pos"] = _param(rng.normal(0.0, 0.1, (cfg.max_len, cfg.d_model)), dt)


def init_encoder_params(cfg: TransformerConfig, prefix: str, rng: np.random.Generator) -> TransformerParams:
    params: TransformerParams = {}
    dt = cfg.np_dtype
    init_embeddings(params, prefix, cfg, rng)
    for i in range(cfg.n_layers):
        lp = f"{prefix}.layer{i}"
        init_layer_norm(params, f"{lp}.ln1", cfg.d_model, dt)
        init_attention(params, f"{lp}.self_attn", cfg.d_model, rng, dt)
        init_layer_norm(params, f"{lp}.ln2", cfg.d_model, dt)
        init_ffn(params, f"{lp}.ffn", cfg.d_model, cfg.d_ff, rng, dt)
    init_layer_norm(params, f"{prefix}.ln_f", cfg.d_model, dt)
    return params


def init_decoder_params(cfg: TransformerConfig, prefix: str, rng: np.random.Generator) -> TransformerParams:
    params: TransformerParams = {}
    dt = cfg.np_dtype
    init_embeddings(params, prefix, cfg, rng)
    for i in range(cfg.decoder_layers):
        lp = f"{prefix}.layer{i}"
        init_layer_norm(params, f"{lp}.ln1", cfg.d_model, dt)
        init_attention(params, f"{lp}.self_attn", cfg.d_model, rng, dt)
        init_layer_norm(params, f"{lp}.ln_cross", cfg.d_model, dt)
        init_attention(params, f"{lp}.cross_attn", cfg.d_model, rng, dt)
        init_layer_norm(params, f"{lp}.ln2", cfg.d_model, dt)
        init_ffn(params, f"{lp}.ffn", cfg.d_model, cfg.d_ff, rng, dt)
    init_layer_norm(params, f"{prefix}.ln_f", cfg.d_model, dt)
    params[f"{prefix}.out_b"] = _param(np.zeros(cfg.vocab_size), dt)
    if not cfg.tie_embeddings:
        params[f"{prefix}.out_W"] = _param(rng.normal(0.0, cfg.d_model**-0.5, (cfg.d_model, cfg.vocab_size)), dt)
    return params


# ---------------------------------------------------------------- blocks


def linear(x: Tensor, params: TransformerParams, name: str) -> Tensor:
    y = x @ params[f"{name}.W"]
    b = params.get(f"{name}.b")
    return y if b is None else y + b


def norm(x: Tensor, params: TransformerParams, name: str) -> Tensor:
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def feed_forward(x: Tensor, params: TransformerParams, name: str) -> Tensor:
    return linear(T.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def _normalise_mask(mask, batch: int, m: int, n: int) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    full = np.broadcast_to(mask, (batch, m, n))
    if not full.any(axis=-1).all():
        raise ContractError("attention mask leaves a query row with no visible key")
    return mask[:, None, :, :]


def multi_head_attention(
    queries: Tensor,
    keys_values: Tensor,
    params: TransformerParams,
    name: str,
    n_heads: int,
    mask=None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``n_heads`` heads.

    ``queries`` is ``[m, d]`` or ``[B, m, d]``; ``keys_values`` likewise with
    ``n`` positions.  ``mask`` is boolean (True = may attend), broadcastable
    to ``[B, m, n]``.  Masked cells get exactly zero weight.
    """
    unbatched = queries.ndim == 2
    if unbatched:
        queries = queries.reshape(1, *queries.shape)
        keys_values = keys_values.reshape(1, *keys_values.shape)
    B, m, d = queries.shape
    n = keys_values.shape[1]
    if keys_values.shape[-1] != d or params[f"{name}.Wq"].shape[0] != d:
        raise ContractError(f"{name}: d_model mismatch between inputs and parameters")
    if d % n_heads:
        raise ContractError(f"d_model={d} not divisible by n_heads={n_heads}")
    dk = d // n_heads
    mask4 = _normalise_mask(mask, B, m, n)

    q = linear_qkv(queries, params, name, "q").reshape(B, m, n_heads, dk).transpose(0, 2, 1, 3)
    k = linear_qkv(keys_values, params, name, "k").reshape(B, n, n_heads, dk).transpose(0, 2, 3, 1)
    v = linear_qkv(keys_values, params, name, "v").reshape(B, n, n_heads, dk).transpose(0, 2, 1, 3)
    scores = (q * (1.0 / math.sqrt(dk))) @ k
    if mask4 is not None:
        scores = scores + np.where(mask4, 0.0, -np.inf).astype(scores.dtype)
    weights = T.softmax(scores, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, m, d)
    out = ctx @ params[f"{name}.Wo"] + params[f"{name}.bo"]
    if unbatched:
        out = out.reshape(m, d)
    if return_weights:
        w = weights.data[0] if unbatched else weights.data
        return out, w
    return out


def linear_qkv(x: Tensor, params: TransformerParams, name: str, which: str) -> Tensor:
    return x @ params[f"{name}.W{which}"] + params[f"{name}.b{which}"]


@lru_cache(maxsize=16)
def _sinusoid_table(max_len: int, d: int, dtype: str) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table.astype(dtype)


def sinusoidal_positions(n: int, d: int, dtype: str = "float64") -> np.ndarray:
    return _sinusoid_table(max(n, 1), d, dtype)[:n]


def as_batch(ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ContractError("token ids must be a sequence or a [batch, length] array")
    return arr, False


def check_ids(ids: np.ndarray, cfg: TransformerConfig) -> None:
    if ids.shape[1] > cfg.max_len:
        raise ContractError(f"sequence length {ids.shape[1]} exceeds max_len={cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractError(f"token id outside [0, {cfg.vocab_size})")


def embed(ids: np.ndarray, params: TransformerParams, prefix: str, cfg: TransformerConfig) -> Tensor:
    x = T.embedding(params[f"{prefix}.embed"], ids) * math.sqrt(cfg.d_model)
    n = ids.shape[1]
    if cfg.positional == "learned":
        return x + params[f"{prefix}.pos"][:n]
    return x + sinusoidal_positions(n, cfg.d_model, cfg.dtype)


def _dropout_rate(cfg: TransformerConfig, train: bool, dropout: float | None) -> float:
    if not train:
        return 0.0
    return cfg.dropout_rate if dropout is None else dropout


def encoder_layer(x: Tensor, params, lp: str, cfg: TransformerConfig, mask, train: bool, rng, p: float) -> Tensor:
    h = norm(x, params, f"{lp}.ln1")
    x = x + T.dropout(multi_head_attention(h, h, params, f"{lp}.self_attn", cfg.n_heads, mask), p, rng, train)
    h = norm(x, params, f"{lp}.ln2")
    return x + T.dropout(feed_forward(h, params, f"{lp}.ffn"), p, rng, train)


def encoder_forward(
    tokens,
    params: TransformerParams,
    cfg: TransformerConfig,
    prefix: str = "enc",
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float | None = None,
) -> list[Tensor]:
    """Run the encoder stack; returns ``[H0, H1, ..., HL]`` with H0 the input embeddings.

    The final layer norm is not applied here; see :func:`encoder_output`.
    """
    ids, unbatched = as_batch(tokens)
    check_ids(ids, cfg)
    p = _dropout_rate(cfg, train, dropout)
    mask = (ids != PAD)[:, None, :]
    x = T.dropout(embed(ids, params, prefix, cfg), p, rng, train)
    states = [x]
    for i in range(cfg.n_layers):
        x = encoder_layer(x, params, f"{prefix}.layer{i}", cfg, mask, train, rng, p)
        states.append(x)
    if unbatched:
        states = [s.reshape(s.shape[1:]) for s in states]
    return states


def encoder_output(states: list[Tensor], params: TransformerParams, prefix: str = "enc") -> Tensor:
    return norm(states[-1], params, f"{prefix}.ln_f")


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def decoder_self_mask(ids: np.ndarray) -> np.ndarray:
    t = ids.shape[1]
    return causal_mask(t)[None, :, :] & (ids != PAD)[:, None, :] | np.eye(t, dtype=bool)[None]


def output_logits(s: Tensor, params: TransformerParams, prefix: str, cfg: TransformerConfig) -> Tensor:
    h = norm(s, params, f"{prefix}.ln_f")
    if cfg.tie_embeddings:
        w = params[f"{prefix}.embed"].transpose(1, 0)
    else:
        w = params[f"{prefix}.out_W"]
    return h @ w + params[f"{prefix}.out_b"]


def decoder_layer(s: Tensor, memory: Tensor, params, lp: str, cfg, self_mask, mem_mask, train, rng, p) -> Tensor:
    h = norm(s, params, f"{lp}.ln1")
    s = s + T.dropout(multi_head_attention(h, h, params, f"{lp}.self_attn", cfg.n_heads, self_mask), p, rng, train)
    h = norm(s, params, f"{lp}.ln_cross")
    s = s + T.dropout(
        multi_head_attention(h, memory, params, f"{lp}.cross_attn", cfg.n_heads, mem_mask), p, rng, train
    )
    h = norm(s, params, f"{lp}.ln2")
    return s + T.dropout(feed_forward(h, params, f"{lp}.ffn"), p, rng, train)


def check_prefix(ids: np.ndarray) -> None:
    if ids.shape[1] == 0:
        raise ContractError("decoder prefix is empty; it must start with <s>")
    if np.any(ids[:, 0] != BOS):
        raise ContractError("decoder prefix must start with <s>")


def decoder_forward(
    target_prefix,
    memory: Tensor,
    params: TransformerParams,
    cfg: TransformerConfig,
    prefix: str = "dec",
    memory_mask=None,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float | None = None,
) -> tuple[list[Tensor], Tensor]:
    """Causal decoder over ``target_prefix`` attending to ``memory``.

    Returns ``(states, logits)`` where ``states`` are ``S0..SL`` and
    ``logits`` is ``[t, vocab]`` (or batched).
    """
    ids, unbatched = as_batch(target_prefix)
    check_prefix(ids)
    check_ids(ids, cfg)
    if unbatched and memory.ndim == 2:
        memory = memory.reshape(1, *memory.shape)
    p = _dropout_rate(cfg, train, dropout)
    self_mask = decoder_self_mask(ids)
    mem_mask = None if memory_mask is None else np.asarray(memory_mask, dtype=bool)[:, None, :]
    s = T.dropout(embed(ids, params, prefix, cfg), p, rng, train)
    states = [s]
    for i in range(cfg.decoder_layers):
        s = decoder_layer(s, memory, params, f"{prefix}.layer{i}", cfg, self_mask, mem_mask, train, rng, p)
        states.append(s)
    logits = output_logits(s, params, prefix, cfg)
    if unbatched:
        states = [x.reshape(x.shape[1:]) for x in states]
        logits = logits.reshape(logits.shape[1:])
    return states, logits


def param_count(params: TransformerParams) -> int:
    return sum(p.size for p in params.values())
