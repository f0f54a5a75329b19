"""Encoder-decoder GEC model with four ways of using a masked language model.

* ``none``  -- plain Transformer encoder-decoder.
* ``init``  -- the same network, with embeddings, self-attention and
  feed-forward weights of both stacks copied from the MLM.
* ``fuse-<variant>`` -- every encoder and decoder layer additionally attends
  over the frozen MLM output ``B`` and averages that branch with its usual
  attention branch (with drop-net during training).  ``variant`` names which
  MLM supplies ``B``: ``vanilla``, ``mask`` (adapted on GEC sources) or
  ``ged`` (fine-tuned for error detection).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, params_hash, save_checkpoint
from .mlm import MlmModel, mlm_representation
from .optim import AdamState, LrSchedule, lr_plateau_step
from .tensor import ContractError, Tensor, no_grad
from .training import copy_params, optimizer_step, pad_batch
from .transformer import (
    TransformerConfig,
    TransformerParams,
    as_batch,
    check_ids,
    check_prefix,
    decoder_self_mask,
    embed,
    encoder_layer,
    feed_forward,
    init_attention,
    init_decoder_params,
    init_encoder_params,
    multi_head_attention,
    norm,
    output_logits,
)
from .vocab import BOS, EOS, PAD

log = logging.getLogger(__name__)

MODE_TAGS = ("none", "init", "fuse-vanilla", "fuse-mask", "fuse-ged")
_VARIANT_KIND = {"vanilla": "mlm", "mask": "mlm_mask_adapted", "ged": "mlm_ged"}


@dataclass(frozen=True)
class IntegrationMode:
    kind: str
    mlm_variant: str | None = None

    def __post_init__(self):
        if self.kind not in ("none", "init", "fuse"):
            raise ContractError(f"unknown integration kind {self.kind!r}")
        if (self.kind == "fuse") != (self.mlm_variant is not None):
            raise ContractError("an MLM variant is given exactly for fuse modes")
        if self.mlm_variant is not None and self.mlm_variant not in _VARIANT_KIND:
            raise ContractError(f"unknown MLM variant {self.mlm_variant!r}")

    @classmethod
    def parse(cls, tag: "str | IntegrationMode") -> "IntegrationMode":
        if isinstance(tag, IntegrationMode):
            return tag
        if tag in ("none", "init"):
            return cls(tag)
        if tag == "fuse":
            return cls("fuse", "vanilla")
        if tag.startswith("fuse-"):
            return cls("fuse", tag[5:])
        raise ContractError(f"unknown mode {tag!r}; expected one of {MODE_TAGS}")

    @property
    def tag(self) -> str:
        return self.kind if self.kind != "fuse" else f"fuse-{self.mlm_variant}"

    @property
    def fused(self) -> bool:
        return self.kind == "fuse"

    @property
    def required_mlm_kind(self) -> str | None:
        return _VARIANT_KIND.get(self.mlm_variant) if self.fused else None


@dataclass
class FusedGecModel:
    config: TransformerConfig
    mode: IntegrationMode
    params: TransformerParams
    mlm: MlmModel | None = None
    drop_net_rate: float = 1.0
    reverse_target: bool = False
    mlm_hash: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.drop_net_rate <= 1.0:
            raise ContractError("drop_net_rate must lie in [0, 1]")
        if self.mode.fused:
            if self.mlm is None:
                raise ContractError(f"mode {self.mode.tag} needs an MLM")
            if self.mlm.config.d_model != self.config.d_model:
                raise ContractError(
                    f"MLM d_model={self.mlm.config.d_model} does not match GEC d_model={self.config.d_model}"
                )
            if self.mlm.config.vocab_size != self.config.vocab_size:
                raise ContractError("MLM and GEC model must share one vocabulary")
            if self.mlm.kind != self.mode.required_mlm_kind:
                raise ContractError(
                    f"mode {self.mode.tag} needs an MLM of kind {self.mode.required_mlm_kind}, got {self.mlm.kind}"
                )
            if self.mlm_hash is None:
                self.mlm_hash = self.mlm.content_hash()

    def meta(self) -> dict:
        return {
            "model_kind": "gec",
            "mode": self.mode.tag,
            "mlm_variant": self.mode.mlm_variant,
            "mlm_hash": self.mlm_hash,
            "config": self.config.to_dict(),
            "mlm_config": self.mlm.config.to_dict() if self.mlm is not None else None,
            "drop_net_rate": self.drop_net_rate,
            "reverse_target": self.reverse_target,
        }


def _add_fusion_params(params: TransformerParams, cfg: TransformerConfig, rng) -> None:
    for i in range(cfg.n_layers):
        init_attention(params, f"enc.layer{i}.bert_attn", cfg.d_model, rng, cfg.np_dtype)
    for i in range(cfg.decoder_layers):
        init_attention(params, f"dec.layer{i}.bert_attn", cfg.d_model, rng, cfg.np_dtype)


def build_gec_model(
    config: TransformerConfig,
    mode="none",
    mlm: MlmModel | None = None,
    seed: int = 0,
    drop_net_rate: float = 1.0,
    reverse_target: bool = False,
) -> FusedGecModel:
    """Fresh GEC model.  Use :func:`init_from_mlm` for the ``init`` mode."""
    mode = IntegrationMode.parse(mode)
    if mode.kind == "init":
        if mlm is None:
            raise ContractError("mode init needs an MLM to copy weights from")
        return init_from_mlm(mlm, config, seed=seed, reverse_target=reverse_target)
    rng = np.random.default_rng(seed)
    params = init_encoder_params(config, "enc", rng)
    params.update(init_decoder_params(config, "dec", rng))
    if mode.fused:
        _add_fusion_params(params, config, rng)
    return FusedGecModel(config, mode, params, mlm if mode.fused else None, drop_net_rate, reverse_target)


def init_name_map(config: TransformerConfig) -> dict[str, str]:
    """GEC parameter path -> MLM parameter path for every weight copied by ``init``."""
    mapping = {}
    blocks = ("ln1", "self_attn", "ln2", "ffn")
    suffixes = {
        "ln1": (".g", ".b"),
        "ln2": (".g", ".b"),
        "self_attn": tuple(f".{w}{x}" for x in "qkvo" for w in ("W", "b")),
        "ffn": (".fc1.W", ".fc1.b", ".fc2.W", ".fc2.b"),
    }
    for stack, n in (("enc", config.n_layers), ("dec", config.decoder_layers)):
        mapping[f"{stack}.embed"] = "mlm.embed"
        mapping[f"{stack}.pos"] = "mlm.pos"
        for i in range(n):
            for blk in blocks:
                for suf in suffixes[blk]:
                    mapping[f"{stack}.layer{i}.{blk}{suf}"] = f"mlm.layer{i}.{blk}{suf}"
        mapping[f"{stack}.ln_f.g"] = "mlm.ln_f.g"
        mapping[f"{stack}.ln_f.b"] = "mlm.ln_f.b"
    mapping["dec.out_b"] = "mlm.head_b"
    return mapping


def init_from_mlm(mlm: MlmModel, config: TransformerConfig, seed: int = 0, reverse_target: bool = False) -> FusedGecModel:
    """Copy MLM weights layer by layer into both stacks of a new GEC model.

    Decoder cross-attention (and its layer norm) has no MLM counterpart and is
    freshly initialised.  Positional embeddings are the MLM's learned ones.
    Nothing is built unless every copied tensor has a matching shape.
    """
    config = config.with_(positional="learned")
    if config.max_len > mlm.config.max_len:
        config = config.with_(max_len=mlm.config.max_len)
    if config.d_model != mlm.config.d_model:
        raise ContractError(
            f"enc.embed: GEC d_model={config.d_model} does not match MLM d_model={mlm.config.d_model}"
        )
    if max(config.n_layers, config.decoder_layers) > mlm.config.n_layers:
        raise ContractError("MLM has fewer layers than the GEC stacks to initialise")
    rng = np.random.default_rng(seed)
    fresh = init_encoder_params(config, "enc", rng)
    fresh.update(init_decoder_params(config, "dec", rng))
    mapping = init_name_map(config)
    for gec_name, mlm_name in mapping.items():
        src = mlm.params.get(mlm_name)
        if src is None or src.shape != fresh[gec_name].shape:
            got = None if src is None else src.shape
            raise ContractError(f"{gec_name}: cannot copy from {mlm_name} (shape {got} vs {fresh[gec_name].shape})")
    params = {}
    for name, p in fresh.items():
        if name in mapping:
            params[name] = Tensor(mlm.params[mapping[name]].data.astype(config.np_dtype), requires_grad=True)
        else:
            params[name] = p
    return FusedGecModel(config, IntegrationMode("init"), params, None, 1.0, reverse_target)


# ----------------------------------------------------------------- fusion


def drop_net_choices(p: float, size, rng: np.random.Generator) -> np.ndarray:
    """Sample drop-net decisions: 0 = average, 1 = GEC branch only, 2 = MLM branch only."""
    u = rng.random(size)
    return np.where(u < p / 2, 1, np.where(u < p, 2, 0))


def drop_net_combine(branch_h: Tensor, branch_b: Tensor, p: float, train: bool, rng=None) -> Tensor:
    """Average two attention branches, or keep only one of them during training.

    In training, each sequence of a batch independently keeps only
    ``branch_h`` with probability p/2, only ``branch_b`` with probability p/2,
    and the average otherwise.  At inference the average is always used.
    """
    if branch_h.shape != branch_b.shape:
        raise ContractError(f"drop-net branches differ in shape: {branch_h.shape} vs {branch_b.shape}")
    if not 0.0 <= p <= 1.0:
        raise ContractError("drop-net rate must lie in [0, 1]")
    if not train or p == 0.0:
        return (branch_h + branch_b) * 0.5
    if rng is None:
        raise ContractError("drop-net in training mode needs an rng")
    lead = branch_h.shape[:1] if branch_h.ndim == 3 else ()
    choice = drop_net_choices(p, lead, rng)
    w_h = np.where(choice == 1, 1.0, np.where(choice == 2, 0.0, 0.5)).astype(branch_h.dtype)
    if lead:
        w_h = w_h[:, None, None]
    return branch_h * w_h + branch_b * (1.0 - w_h)


def fuse_encoder_layer(h_prev: Tensor, bert: Tensor, params, layer: int, cfg: TransformerConfig, *,
                       src_mask=None, bert_mask=None, train: bool = False, rng=None,
                       drop_net_rate: float = 1.0, dropout: float = 0.0) -> Tensor:
    """One fused encoder layer: self-attention and MLM attention averaged, then the FFN."""
    if bert.shape[-1] != h_prev.shape[-1]:
        raise ContractError(f"MLM output width {bert.shape[-1]} differs from encoder width {h_prev.shape[-1]}")
    lp = f"enc.layer{layer}"
    h = norm(h_prev, params, f"{lp}.ln1")
    a_h = multi_head_attention(h, h, params, f"{lp}.self_attn", cfg.n_heads, src_mask)
    a_b = multi_head_attention(h, bert, params, f"{lp}.bert_attn", cfg.n_heads, bert_mask)
    x = h_prev + T.dropout(drop_net_combine(a_h, a_b, drop_net_rate, train, rng), dropout, rng, train)
    return x + T.dropout(feed_forward(norm(x, params, f"{lp}.ln2"), params, f"{lp}.ffn"), dropout, rng, train)


def fuse_decoder_layer(s_prev: Tensor, h_top: Tensor, bert: Tensor, params, layer: int, cfg: TransformerConfig, *,
                       self_mask=None, src_mask=None, bert_mask=None, train: bool = False, rng=None,
                       drop_net_rate: float = 1.0, dropout: float = 0.0) -> Tensor:
    """Causal self-attention, then encoder/MLM attention averaged, then the FFN."""
    if bert.shape[-1] != s_prev.shape[-1] or h_top.shape[-1] != s_prev.shape[-1]:
        raise ContractError("decoder, encoder and MLM widths must agree")
    lp = f"dec.layer{layer}"
    h = norm(s_prev, params, f"{lp}.ln1")
    s_hat = s_prev + T.dropout(
        multi_head_attention(h, h, params, f"{lp}.self_attn", cfg.n_heads, self_mask), dropout, rng, train
    )
    q = norm(s_hat, params, f"{lp}.ln_cross")
    a_h = multi_head_attention(q, h_top, params, f"{lp}.cross_attn", cfg.n_heads, src_mask)
    a_b = multi_head_attention(q, bert, params, f"{lp}.bert_attn", cfg.n_heads, bert_mask)
    s_tilde = s_hat + T.dropout(drop_net_combine(a_h, a_b, drop_net_rate, train, rng), dropout, rng, train)
    return s_tilde + T.dropout(
        feed_forward(norm(s_tilde, params, f"{lp}.ln2"), params, f"{lp}.ffn"), dropout, rng, train
    )


# ----------------------------------------------------------------- forward


@dataclass
class EncoderState:
    memory: Tensor
    src_mask: np.ndarray
    bert: Tensor | None
    states: list[Tensor] = field(default_factory=list)

    def select(self, rows: np.ndarray) -> "EncoderState":
        return EncoderState(
            Tensor(self.memory.data[rows]),
            self.src_mask[rows],
            None if self.bert is None else Tensor(self.bert.data[rows]),
        )


def _rate(model: FusedGecModel, train: bool, dropout: float | None) -> float:
    if not train:
        return 0.0
    return model.config.dropout_rate if dropout is None else dropout


def mlm_features(model: FusedGecModel, src_ids: np.ndarray) -> Tensor:
    """``B`` for a batch of sources, computed with the MLM frozen (never on the tape)."""
    with no_grad():
        b = mlm_representation(src_ids, model.mlm)
    return Tensor(b.data.astype(model.config.np_dtype))


def encode(model: FusedGecModel, src, *, train: bool = False, rng=None, dropout: float | None = None) -> EncoderState:
    ids, _ = as_batch(src)
    cfg = model.config
    check_ids(ids, cfg)
    if ids.shape[1] == 0:
        raise ContractError("empty source sentence")
    p = _rate(model, train, dropout)
    src_mask = ids != PAD
    attn_mask = src_mask[:, None, :]
    bert = mlm_features(model, ids) if model.mode.fused else None
    x = T.dropout(embed(ids, model.params, "enc", cfg), p, rng, train)
    states = [x]
    for i in range(cfg.n_layers):
        if bert is None:
            x = encoder_layer(x, model.params, f"enc.layer{i}", cfg, attn_mask, train, rng, p)
        else:
            x = fuse_encoder_layer(x, bert, model.params, i, cfg, src_mask=attn_mask, bert_mask=attn_mask,
                                   train=train, rng=rng, drop_net_rate=model.drop_net_rate, dropout=p)
        states.append(x)
    memory = norm(x, model.params, "enc.ln_f")
    return EncoderState(memory, src_mask, bert, states)


def decode(model: FusedGecModel, state: EncoderState, tgt_in, *, train: bool = False, rng=None,
           dropout: float | None = None, return_states: bool = False):
    """Next-token logits ``[B, t, V]`` for every prefix position of ``tgt_in``."""
    ids, _ = as_batch(tgt_in)
    check_prefix(ids)
    cfg = model.config
    check_ids(ids, cfg)
    p = _rate(model, train, dropout)
    self_mask = decoder_self_mask(ids)
    mem_mask = state.src_mask[:, None, :]
    s = T.dropout(embed(ids, model.params, "dec", cfg), p, rng, train)
    states = [s]
    for i in range(cfg.decoder_layers):
        if state.bert is None:
            lp = f"dec.layer{i}"
            h = norm(s, model.params, f"{lp}.ln1")
            s = s + T.dropout(multi_head_attention(h, h, model.params, f"{lp}.self_attn", cfg.n_heads, self_mask),
                              p, rng, train)
            h = norm(s, model.params, f"{lp}.ln_cross")
            s = s + T.dropout(
                multi_head_attention(h, state.memory, model.params, f"{lp}.cross_attn", cfg.n_heads, mem_mask),
                p, rng, train)
            s = s + T.dropout(feed_forward(norm(s, model.params, f"{lp}.ln2"), model.params, f"{lp}.ffn"),
                              p, rng, train)
        else:
            s = fuse_decoder_layer(s, state.memory, state.bert, model.params, i, cfg, self_mask=self_mask,
                                   src_mask=mem_mask, bert_mask=mem_mask, train=train, rng=rng,
                                   drop_net_rate=model.drop_net_rate, dropout=p)
        states.append(s)
    logits = output_logits(s, model.params, "dec", cfg)
    return (logits, states) if return_states else logits


def gec_forward(src, tgt_prefix, model: FusedGecModel, *, train: bool = False, rng=None,
                dropout: float | None = None) -> Tensor:
    """Logits for the next token at every position of ``tgt_prefix`` (which starts with ``<s>``)."""
    src_ids, unbatched = as_batch(src)
    tgt_ids, _ = as_batch(tgt_prefix)
    state = encode(model, src_ids, train=train, rng=rng, dropout=dropout)
    logits = decode(model, state, tgt_ids, train=train, rng=rng, dropout=dropout)
    return logits.reshape(logits.shape[1:]) if unbatched else logits


def trainable_params(model: FusedGecModel) -> TransformerParams:
    return model.params


# ----------------------------------------------------------------- training


@dataclass
class GecTrainConfig:
    """Desk-scale defaults; see ``TABLE1_GEC`` for the reference values."""

    epochs: int = 30
    max_tokens: int = 1200
    learning_rate: float = 1e-3
    min_learning_rate: float = 1e-3 / 30
    decay_factor: float = 0.7
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    label_smoothing: float = 0.1
    clip_norm: float | None = 0.1
    dropout: float | None = None
    warmup_steps: int = 0
    seed: int = 0
    keep_epoch_checkpoints: bool = False


TABLE1_GEC = GecTrainConfig(epochs=30, max_tokens=4096, learning_rate=3e-5, min_learning_rate=1e-6, dropout=0.3)


def target_sequences(tgt: Sequence[int], reverse: bool = False) -> tuple[list[int], list[int]]:
    """``(decoder input, decoder output)``: ``<s> y`` and ``y </s>``, with ``y`` reversed for R2L."""
    y = list(tgt)[::-1] if reverse else list(tgt)
    return [BOS] + y, y + [EOS]


def make_batches(pairs: list[tuple[list[int], list[int]]], max_tokens: int, rng: np.random.Generator | None):
    """Group pair indices into batches of at most ``max_tokens`` non-pad tokens.

    A pair costs ``max(len(src), len(tgt) + 1)`` tokens.  Pairs are sorted by
    length (shuffled first when ``rng`` is given) so batches carry little padding.
    """
    idx = np.arange(len(pairs)) if rng is None else rng.permutation(len(pairs))
    cost = np.array([max(len(s), len(t) + 1) for s, t in pairs])
    idx = idx[np.argsort(cost[idx], kind="stable")]
    batches, cur, cur_tokens = [], [], 0
    for i in idx:
        if cur and cur_tokens + cost[i] > max_tokens:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(int(i))
        cur_tokens += int(cost[i])
    if cur:
        batches.append(cur)
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def _tensors_for(pairs, batch, reverse):
    srcs = [pairs[i][0] for i in batch]
    tins, touts = zip(*(target_sequences(pairs[i][1], reverse) for i in batch))
    return pad_batch(srcs), pad_batch(list(tins)), pad_batch(list(touts))


def batch_loss(model: FusedGecModel, src, tin, tout, eps: float, *, train=False, rng=None, dropout=None) -> Tensor:
    logits = gec_forward(src, tin, model, train=train, rng=rng, dropout=dropout)
    return T.label_smoothed_ce(logits.reshape(-1, logits.shape[-1]), tout.reshape(-1), eps, PAD)


def corpus_loss(model: FusedGecModel, pairs, eps: float = 0.1, max_tokens: int = 2000) -> float:
    """Token-weighted mean label-smoothed loss over ``pairs`` (no dropout)."""
    total, count = 0.0, 0
    with no_grad():
        for batch in make_batches(pairs, max_tokens, None):
            src, tin, tout = _tensors_for(pairs, batch, model.reverse_target)
            n = int((tout != PAD).sum())
            total += batch_loss(model, src, tin, tout, eps).item() * n
            count += n
    return total / max(count, 1)


@dataclass
class GecHistory:
    epochs: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    def column(self, key):
        return [e[key] for e in self.epochs]


def train_gec(model: FusedGecModel, train_pairs, dev_pairs=None, cfg: GecTrainConfig | None = None,
              out_dir=None) -> tuple[FusedGecModel, GecHistory]:
    """Label-smoothed training with per-epoch dev evaluation and plateau decay.

    Stops at ``cfg.epochs`` or once the learning rate falls under
    ``cfg.min_learning_rate``.  The parameters with the best dev loss are
    restored at the end.  The MLM (fuse modes) is never updated.
    """
    cfg = cfg or GecTrainConfig()
    pairs = [(list(s), list(t)) for s, t in train_pairs]
    if not pairs:
        raise ContractError("train_gec needs a non-empty corpus")
    dev = [(list(s), list(t)) for s, t in dev_pairs] if dev_pairs else pairs
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    sched = LrSchedule(cfg.learning_rate, cfg.min_learning_rate, cfg.decay_factor)
    history = GecHistory()
    best_loss, best_params = float("inf"), None
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for batch in make_batches(pairs, cfg.max_tokens, rng):
            if cfg.warmup_steps and state.step_count < cfg.warmup_steps:
                state.learning_rate = sched.current_lr * (state.step_count + 1) / cfg.warmup_steps
            else:
                state.learning_rate = sched.current_lr
            src, tin, tout = _tensors_for(pairs, batch, model.reverse_target)
            loss = batch_loss(model, src, tin, tout, cfg.label_smoothing, train=True, rng=rng, dropout=cfg.dropout)
            loss.backward()
            optimizer_step(model.params, state, cfg.clip_norm)
            losses.append(loss.item())
        dev_loss = corpus_loss(model, dev, cfg.label_smoothing)
        lr_used = sched.current_lr
        if dev_loss < best_loss:
            best_loss, best_params = dev_loss, copy_params(model.params)
        _, stop = lr_plateau_step(sched, dev_loss)
        history.epochs.append({
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "dev_loss": dev_loss,
            "lr": lr_used,
            "seconds": time.perf_counter() - t0,
        })
        log.info("gec[%s] epoch %d train %.4f dev %.4f lr %.2e", model.mode.tag, epoch + 1,
                 np.mean(losses), dev_loss, lr_used)
        if out_dir is not None:
            name = f"epoch{epoch + 1}.ckpt" if cfg.keep_epoch_checkpoints else "last.ckpt"
            save_gec(model, out_dir / name)
        if stop:
            history.stopped_early = True
            break
    if best_params is not None:
        model.params = best_params
    return model, history


# ----------------------------------------------------------------- io


def save_gec(model: FusedGecModel, path) -> str:
    return save_checkpoint(path, model.params, model.meta())


def load_gec(path, mlm: MlmModel | None = None) -> FusedGecModel:
    arrays, meta = load_checkpoint(path)
    mode = IntegrationMode.parse(meta["mode"])
    cfg = TransformerConfig.from_dict(meta["config"])
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    if mode.fused:
        if mlm is None:
            raise ContractError(f"checkpoint {path} is a {mode.tag} model; its MLM checkpoint is required")
        if mlm.content_hash() != meta["mlm_hash"]:
            raise ContractError("the supplied MLM does not match the hash recorded in the GEC checkpoint")
    return FusedGecModel(cfg, mode, params, mlm if mode.fused else None, meta["drop_net_rate"],
                         meta["reverse_target"], meta["mlm_hash"])


def gec_params_hash(model: FusedGecModel) -> str:
    return params_hash(model.params, model.meta())
