"""Miniature masked language model: pre-training, GEC-domain adaptation, GED fine-tuning.

The model is a learned-position Transformer encoder (prefix ``mlm``) whose
output head is tied to the input embedding.  Its final-layer, final-norm
states are the representation ``B`` read by the fused GEC model.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, params_hash, save_checkpoint
from .optim import AdamState
from .tensor import ContractError, Tensor, no_grad
from .training import copy_params, make_rng, optimizer_step, pad_batch
from .transformer import (
    TransformerConfig,
    TransformerParams,
    as_batch,
    encoder_forward,
    encoder_output,
    init_encoder_params,
)
from .vocab import MASK, N_RESERVED, PAD

log = logging.getLogger(__name__)

MLM_KINDS = ("mlm", "mlm_mask_adapted", "mlm_ged")


@dataclass
class MlmModel:
    config: TransformerConfig
    params: TransformerParams
    ged_head: TransformerParams | None = None
    kind: str = "mlm"

    def __post_init__(self):
        if self.kind not in MLM_KINDS:
            raise ContractError(f"unknown MLM kind {self.kind!r}")
        if (self.ged_head is not None) != (self.kind == "mlm_ged"):
            raise ContractError("a GED head is present exactly when the model is GED fine-tuned")

    def all_params(self) -> TransformerParams:
        return {**self.params, **(self.ged_head or {})}

    def copy(self, kind: str | None = None, ged_head: TransformerParams | None = None) -> "MlmModel":
        head = ged_head if ged_head is not None else (copy_params(self.ged_head) if self.ged_head else None)
        return MlmModel(self.config, copy_params(self.params), head, kind or self.kind)

    def content_hash(self) -> str:
        return params_hash(self.all_params(), self.meta())

    def meta(self) -> dict:
        return {"model_kind": self.kind, "config": self.config.to_dict()}


@dataclass
class GedExample:
    tokens: list[int]
    labels: list[int]

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise ContractError(
                f"GED example has {len(self.tokens)} tokens but {len(self.labels)} labels"
            )


@dataclass
class MlmTrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    mask_rate: float = 0.15
    clip_norm: float | None = 1.0
    dropout: float | None = None
    dev_fraction: float = 0.05
    seed: int = 0


@dataclass
class GedTrainConfig:
    """Defaults are the GED block of the reference hyperparameter table."""

    epochs: int = 3
    batch_size: int = 32
    max_len: int = 128
    learning_rate: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout: float = 0.1
    clip_norm: float | None = None
    seed: int = 0


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)

    def column(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]


def init_mlm(config: TransformerConfig, seed: int = 0) -> MlmModel:
    rng = np.random.default_rng(seed)
    if config.positional != "learned":
        config = config.with_(positional="learned")
    params = init_encoder_params(config, "mlm", rng)
    params["mlm.head_b"] = Tensor(np.zeros(config.vocab_size, dtype=config.np_dtype), requires_grad=True)
    return MlmModel(config, params)


def mask_tokens(tokens: Sequence[int], mask_rate: float, rng_seed, vocab_size: int):
    """Corrupt a sequence for masked-LM training.

    Each position is selected with probability ``mask_rate`` (at least one
    position is always selected).  Selected positions become ``<mask>`` 80% of
    the time, a random non-reserved token 10%, and stay unchanged 10%.

    Returns ``(corrupted, positions, original_ids)``.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ContractError("mask_rate must lie in (0, 1)")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if n == 0:
        raise ContractError("cannot mask an empty sequence")
    rng = make_rng(rng_seed)
    selected = rng.random(n) < mask_rate
    if not selected.any():
        selected[rng.integers(n)] = True
    positions = np.nonzero(selected)[0]
    action = rng.random(len(positions))
    randoms = rng.integers(N_RESERVED, vocab_size, size=len(positions))
    corrupted = tokens.copy()
    for pos, a, r in zip(positions, action, randoms):
        if a < 0.8:
            corrupted[pos] = MASK
        elif a < 0.9:
            corrupted[pos] = r
    return corrupted, positions, tokens[positions].copy()


def mlm_forward(tokens, model: MlmModel, *, train: bool = False, rng=None, dropout: float | None = None):
    """Return ``(B, logits)``: final-layer states and vocabulary logits at every position."""
    B = mlm_representation(tokens, model, train=train, rng=rng, dropout=dropout)
    return B, _mlm_logits(B, model)


def mlm_representation(tokens, model: MlmModel, *, train: bool = False, rng=None, dropout=None) -> Tensor:
    states = encoder_forward(tokens, model.params, model.config, "mlm", train=train, rng=rng, dropout=dropout)
    return encoder_output(states, model.params, "mlm")


def _mlm_logits(h: Tensor, model: MlmModel) -> Tensor:
    return h @ model.params["mlm.embed"].transpose(1, 0) + model.params["mlm.head_b"]


def _masked_batch(sents: list[list[int]], mask_rate: float, rng, vocab_size: int):
    corrupted, rows, cols, gold = [], [], [], []
    for i, s in enumerate(sents):
        c, pos, orig = mask_tokens(s, mask_rate, rng, vocab_size)
        corrupted.append(list(c))
        rows.extend([i] * len(pos))
        cols.extend(pos.tolist())
        gold.extend(orig.tolist())
    return pad_batch(corrupted), np.array(rows), np.array(cols), np.array(gold)


def masked_lm_loss(model: MlmModel, batch, *, train: bool = False, rng=None, dropout=None) -> Tensor:
    ids, rows, cols, gold = batch
    B = mlm_representation(ids, model, train=train, rng=rng, dropout=dropout)
    logits = _mlm_logits(B[rows, cols], model)
    return T.label_smoothed_ce(logits, gold, epsilon_ls=0.0, ignore_index=None)


def mlm_eval_loss(model: MlmModel, sentences: list[list[int]], mask_rate: float = 0.15, seed: int = 1234,
                  batch_size: int = 128) -> float:
    """Mean per-masked-token loss under a fixed masking draw."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(sentences), batch_size):
            batch = _masked_batch(sentences[start : start + batch_size], mask_rate, rng, model.config.vocab_size)
            n = len(batch[3])
            total += masked_lm_loss(model, batch).item() * n
            count += n
    return total / max(count, 1)


def _split_dev(corpus, dev, fraction, rng):
    if dev is not None or fraction <= 0 or len(corpus) < 2:
        return list(corpus), list(dev) if dev is not None else []
    order = rng.permutation(len(corpus))
    n_dev = max(1, int(round(fraction * len(corpus))))
    return [corpus[i] for i in order[n_dev:]], [corpus[i] for i in order[:n_dev]]


def _train_masked_lm(model: MlmModel, corpus, cfg: MlmTrainConfig, dev=None) -> tuple[MlmModel, TrainHistory]:
    rng = np.random.default_rng(cfg.seed)
    train, dev = _split_dev([list(s) for s in corpus], dev, cfg.dev_fraction, rng)
    if not train:
        raise ContractError("masked-LM training needs a non-empty corpus")
    train = [s[: model.config.max_len] for s in train]
    dev = [s[: model.config.max_len] for s in dev]
    state = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            sents = [train[i] for i in order[start : start + cfg.batch_size]]
            batch = _masked_batch(sents, cfg.mask_rate, rng, model.config.vocab_size)
            loss = masked_lm_loss(model, batch, train=True, rng=rng, dropout=cfg.dropout)
            loss.backward()
            optimizer_step(model.params, state, cfg.clip_norm)
            losses.append(loss.item())
        dev_loss = mlm_eval_loss(model, dev) if dev else float("nan")
        history.epochs.append({"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "dev_loss": dev_loss})
        log.info("mlm epoch %d train %.4f dev %.4f", epoch + 1, np.mean(losses), dev_loss)
    return model, history


def pretrain_mlm(corpus, model: MlmModel, cfg: MlmTrainConfig | None = None, dev=None):
    """Masked-LM training on raw sentences (id lists).  Returns ``(model, history)``.

    The input model is left untouched; the returned model is a trained copy.
    """
    cfg = cfg or MlmTrainConfig()
    if len(corpus) == 0:
        raise ContractError("pretrain_mlm needs a non-empty corpus")
    return _train_masked_lm(model.copy(kind="mlm"), corpus, cfg, dev)


def continue_mlm_training(model: MlmModel, gec_source_sentences, cfg: MlmTrainConfig | None = None, dev=None):
    """Adapt a pre-trained MLM to the erroneous source side of GEC data (same objective)."""
    cfg = cfg or MlmTrainConfig()
    if len(gec_source_sentences) == 0:
        raise ContractError("continue_mlm_training needs a non-empty corpus")
    adapted = model.copy(kind="mlm_mask_adapted")
    if model.kind == "mlm_ged":
        adapted.ged_head = None
    if cfg.epochs == 0:
        return adapted, TrainHistory()
    return _train_masked_lm(adapted, gec_source_sentences, cfg, dev)


# ------------------------------------------------------------------ GED


def _init_ged_head(cfg: TransformerConfig, rng) -> TransformerParams:
    dt = cfg.np_dtype
    return {
        "ged.W": Tensor(rng.normal(0.0, 0.02, (cfg.d_model,)).astype(dt), requires_grad=True),
        "ged.b": Tensor(np.zeros((), dtype=dt), requires_grad=True),
    }


def _ged_logits(model: MlmModel, ids, *, train=False, rng=None, dropout=None) -> Tensor:
    B = mlm_representation(ids, model, train=train, rng=rng, dropout=dropout)
    B = T.dropout(B, dropout or 0.0, rng, train)
    return B @ model.ged_head["ged.W"] + model.ged_head["ged.b"]


def ged_metrics(model: MlmModel, examples: list[GedExample], batch_size: int = 128) -> dict:
    tp = fp = fn = correct = total = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        probs = ged_predict_batch(model, [e.tokens for e in chunk])
        for p, e in zip(probs, chunk):
            pred = p >= 0.5
            gold = np.asarray(e.labels, dtype=bool)
            tp += int(np.sum(pred & gold))
            fp += int(np.sum(pred & ~gold))
            fn += int(np.sum(~pred & gold))
            correct += int(np.sum(pred == gold))
            total += len(gold)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"accuracy": correct / max(total, 1), "precision": prec, "recall": rec, "f1": f1}


def finetune_ged(model: MlmModel, examples: list[GedExample], cfg: GedTrainConfig | None = None,
                 dev: list[GedExample] | None = None):
    """Full fine-tuning of the MLM encoder plus a per-token binary head.

    Returns ``(ged_model, history)``; the input model is not modified.
    """
    cfg = cfg or GedTrainConfig()
    for ex in examples:
        if len(ex.tokens) != len(ex.labels):
            raise ContractError("GED labels are not aligned with tokens")
    if not examples:
        raise ContractError("finetune_ged needs training examples")
    rng = np.random.default_rng(cfg.seed)
    ged = model.copy(kind="mlm_ged", ged_head=_init_ged_head(model.config, rng))
    params = ged.all_params()
    state = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    limit = min(cfg.max_len, model.config.max_len)
    data = [(e.tokens[:limit], e.labels[:limit]) for e in examples]
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [data[i] for i in order[start : start + cfg.batch_size]]
            ids = pad_batch([c[0] for c in chunk])
            labels = pad_batch([c[1] for c in chunk])
            logits = _ged_logits(ged, ids, train=True, rng=rng, dropout=cfg.dropout)
            loss = T.binary_cross_entropy_with_logits(logits, labels, weight=(ids != PAD))
            loss.backward()
            optimizer_step(params, state, cfg.clip_norm)
            losses.append(loss.item())
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if dev:
            m = ged_metrics(ged, dev)
            row.update(dev_f1=m["f1"], dev_accuracy=m["accuracy"])
        history.epochs.append(row)
        log.info("ged epoch %d %s", epoch + 1, row)
    return ged, history


def ged_predict_batch(model: MlmModel, token_lists: list[list[int]]) -> list[np.ndarray]:
    if model.ged_head is None:
        raise ContractError("model has no GED head; run finetune_ged first")
    ids = pad_batch(token_lists)
    with no_grad():
        z = _ged_logits(model, ids).data
    probs = T._sigmoid_np(z.astype(np.float64))
    return [probs[i, : len(t)] for i, t in enumerate(token_lists)]


def ged_predict(model: MlmModel, tokens: Sequence[int]) -> np.ndarray:
    """Per-token probability that the token is grammatically incorrect."""
    ids, _ = as_batch(tokens)
    return ged_predict_batch(model, [list(ids[0])])[0]


# ------------------------------------------------------------------ io


def save_mlm(model: MlmModel, path) -> str:
    return save_checkpoint(path, model.all_params(), model.meta())


def load_mlm(path) -> MlmModel:
    arrays, meta = load_checkpoint(Path(path))
    cfg = TransformerConfig.from_dict(meta["config"])
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("mlm.")}
    head = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("ged.")} or None
    return MlmModel(cfg, params, head, meta["model_kind"])


def train_config_dict(cfg) -> dict:
    return asdict(cfg)
