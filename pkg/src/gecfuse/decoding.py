"""Beam search, sequence scoring and right-to-left n-best re-ranking.

Scores are sums of natural-log token probabilities.  An ensemble scores a
token by the arithmetic mean of its members' log-probabilities.  ``max_len``
counts generated tokens including the closing ``</s>``; a hypothesis that
reaches it without ``</s>`` is finished as is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gec_model import FusedGecModel, decode, encode
from .tensor import ContractError, _log_softmax_np, no_grad
from .training import pad_batch
from .vocab import BOS, EOS, MASK, PAD, UNK, Vocab

BANNED = (PAD, BOS, MASK)


@dataclass
class Hypothesis:
    tokens: list[int]
    l2r_score: float
    r2l_score: float | None = None
    final_score: float | None = None

    @property
    def words(self) -> list[int]:
        """Tokens without the closing ``</s>``."""
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)

    @property
    def ranking_score(self) -> float:
        return self.l2r_score if self.final_score is None else self.final_score


@dataclass
class NBest:
    source: list[int]
    hypotheses: list[Hypothesis] = field(default_factory=list)

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _as_models(models) -> list[FusedGecModel]:
    models = [models] if isinstance(models, FusedGecModel) else list(models)
    if not models:
        raise ContractError("at least one model is required")
    if len({m.config.vocab_size for m in models}) != 1:
        raise ContractError("ensemble members must share one vocabulary")
    return models


def _check_source(src) -> list[int]:
    src = [int(t) for t in src]
    if not src:
        raise ContractError("cannot decode an empty source sentence")
    return src


def beam_search_batch(models, sources: Sequence[Sequence[int]], beam_size: int = 5, max_len: int = 40,
                      banned: Sequence[int] = BANNED) -> list[NBest]:
    """Beam search for several sources at once; returns one :class:`NBest` per source.

    Finished hypotheses leave the beam, which then shrinks, so at most
    ``beam_size`` hypotheses are produced per source.  With ``beam_size=1``
    this is exactly greedy decoding.
    """
    if beam_size < 1:
        raise ContractError("beam_size must be at least 1")
    models = _as_models(models)
    sources = [_check_source(s) for s in sources]
    n_sent = len(sources)
    vocab_size = models[0].config.vocab_size
    ban = np.zeros(vocab_size, dtype=bool)
    ban[[b for b in banned if b < vocab_size]] = True
    with no_grad():
        src_ids = pad_batch(sources)
        states = [encode(m, src_ids) for m in models]
        live = [[([BOS], 0.0)] for _ in range(n_sent)]
        finished: list[list[Hypothesis]] = [[] for _ in range(n_sent)]
        for step in range(max_len):
            rows, prefixes, scores = [], [], []
            for i, hyps in enumerate(live):
                for toks, sc in hyps:
                    rows.append(i)
                    prefixes.append(toks)
                    scores.append(sc)
            if not rows:
                break
            rows_arr = np.array(rows)
            prefix_ids = np.array(prefixes, dtype=np.int64)
            logp = np.zeros((len(rows), vocab_size))
            for m, st in zip(models, states):
                logits = decode(m, st.select(rows_arr), prefix_ids).data[:, -1, :].astype(np.float64)
                logp += _log_softmax_np(logits)
            logp /= len(models)
            cand = np.asarray(scores)[:, None] + logp
            cand[:, ban] = -np.inf
            new_live = [[] for _ in range(n_sent)]
            start = 0
            for i in range(n_sent):
                n_h = len(live[i])
                if n_h == 0:
                    continue
                k = beam_size - len(finished[i])
                block = cand[start : start + n_h].reshape(-1)
                order = np.argsort(-block, kind="stable")[:k]
                for flat in order:
                    if not np.isfinite(block[flat]):
                        continue
                    h, tok = divmod(int(flat), vocab_size)
                    toks = prefixes[start + h] + [tok]
                    score = float(block[flat])
                    if tok == EOS or step + 1 == max_len:
                        finished[i].append(Hypothesis(toks[1:], score))
                    else:
                        new_live[i].append((toks, score))
                start += n_h
            live = new_live
    out = []
    for src, fin in zip(sources, finished):
        fin.sort(key=lambda h: -h.l2r_score)
        out.append(NBest(src, fin))
    return out


def beam_search(models, source: Sequence[int], beam_size: int = 5, max_len: int = 40) -> NBest:
    return beam_search_batch(models, [source], beam_size, max_len)[0]


def greedy_decode(models, source: Sequence[int], max_len: int = 40, banned: Sequence[int] = BANNED) -> list[int]:
    """Argmax token at every step until ``</s>``; returns generated tokens including ``</s>`` if reached."""
    models = _as_models(models)
    src = _check_source(source)
    vocab_size = models[0].config.vocab_size
    with no_grad():
        states = [encode(m, np.array([src])) for m in models]
        prefix = [BOS]
        for _ in range(max_len):
            logp = np.zeros(vocab_size)
            for m, st in zip(models, states):
                logits = decode(m, st, np.array([prefix])).data[0, -1].astype(np.float64)
                logp += _log_softmax_np(logits)
            logp[[b for b in banned if b < vocab_size]] = -np.inf
            tok = int(np.argmax(logp))
            prefix.append(tok)
            if tok == EOS:
                break
    return prefix[1:]


def _scoring_sequences(target: Sequence[int], direction: str) -> tuple[list[int], list[int]]:
    y = [int(t) for t in target]
    if y and y[0] == BOS:
        y = y[1:]
    has_eos = bool(y) and y[-1] == EOS
    if has_eos:
        y = y[:-1]
    if direction == "r2l":
        y = y[::-1]
    elif direction != "l2r":
        raise ContractError(f"direction must be 'l2r' or 'r2l', got {direction!r}")
    out = y + ([EOS] if has_eos else [])
    if not out:
        raise ContractError("nothing to score")
    return [BOS] + out[:-1], out


def score_sequences(model: FusedGecModel, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
                    direction: str = "l2r") -> np.ndarray:
    """Log-probability of each target given its source.

    Targets may carry ``<s>``/``</s>``; a trailing ``</s>`` is scored.  For
    ``r2l`` the words are reversed before scoring (boundaries stay put).
    """
    if len(sources) != len(targets):
        raise ContractError("sources and targets differ in number")
    vocab_size = model.config.vocab_size
    tins, touts = [], []
    for t in targets:
        if any(int(x) < 0 or int(x) >= vocab_size for x in t):
            raise ContractError("target token outside the model vocabulary")
        tin, tout = _scoring_sequences(t, direction)
        tins.append(tin)
        touts.append(tout)
    with no_grad():
        state = encode(model, pad_batch([_check_source(s) for s in sources]))
        logits = decode(model, state, pad_batch(tins)).data.astype(np.float64)
    logp = _log_softmax_np(logits)
    tout = pad_batch(touts)
    picked = np.take_along_axis(logp, tout[..., None], axis=-1)[..., 0]
    return np.where(tout != PAD, picked, 0.0).sum(axis=1)


def score_sequence(model: FusedGecModel, source: Sequence[int], target: Sequence[int], direction: str = "l2r") -> float:
    return float(score_sequences(model, [source], [target], direction)[0])


def ensemble_scores(models, source, targets, direction: str) -> np.ndarray:
    models = _as_models(models)
    srcs = [source] * len(targets)
    return np.mean([score_sequences(m, srcs, targets, direction) for m in models], axis=0)


def sort_by_final(nbest: NBest, normalize_length: bool = False) -> NBest:
    """Stable descending sort on ``l2r + r2l`` (missing R2L scores count as 0)."""
    for h in nbest.hypotheses:
        h.final_score = h.l2r_score + (h.r2l_score or 0.0)

    def key(h):
        score = h.final_score
        return -(score / max(len(h.tokens), 1)) if normalize_length else -score

    nbest.hypotheses = sorted(nbest.hypotheses, key=key)
    return nbest


def rerank(nbest: NBest, l2r_models, r2l_models, n_models: int = 4, normalize_length: bool = False) -> NBest:
    """Rescore with ensembles of L2R and R2L models and re-sort by the summed scores."""
    l2r_models, r2l_models = _as_models(l2r_models), _as_models(r2l_models)
    if len(l2r_models) != n_models or len(r2l_models) != n_models:
        raise ContractError(
            f"expected {n_models} L2R and {n_models} R2L models, got {len(l2r_models)} and {len(r2l_models)}"
        )
    if not nbest.hypotheses:
        raise ContractError("cannot rerank an empty n-best list")
    targets = [h.tokens for h in nbest.hypotheses]
    l2r = ensemble_scores(l2r_models, nbest.source, targets, "l2r")
    r2l = ensemble_scores(r2l_models, nbest.source, targets, "r2l")
    for h, a, b in zip(nbest.hypotheses, l2r, r2l):
        h.l2r_score, h.r2l_score = float(a), float(b)
    return sort_by_final(nbest, normalize_length)


# ------------------------------------------------------------------ text level


def restore_unknowns(source_words: Sequence[str], output_words: Sequence[str], vocab: Vocab) -> list[str]:
    """Replace ``<unk>`` outputs with the source's out-of-vocabulary words, in order."""
    pending = [w for w in source_words if w not in vocab]
    out = []
    for w in output_words:
        if w == vocab.itos[UNK]:
            if pending:
                out.append(pending.pop(0))
            continue
        out.append(w)
    return out


def correct_sentences(models, vocab: Vocab, sentences: Sequence[Sequence[str]], beam_size: int = 5,
                      max_len: int | None = None, batch_size: int = 64, return_nbest: bool = False):
    """Decode token sentences with beam search; returns corrected token lists."""
    models = _as_models(models)
    limit = models[0].config.max_len
    outputs, nbests = [], []
    for start in range(0, len(sentences), batch_size):
        chunk = sentences[start : start + batch_size]
        ids = [vocab.encode(s)[:limit] for s in chunk]
        width = max_len or min(limit, max(len(s) for s in ids) + 8)
        for words, nb in zip(chunk, beam_search_batch(models, ids, beam_size, width)):
            out = vocab.decode(nb.best.words)
            if models[0].reverse_target:
                out = out[::-1]
            outputs.append(restore_unknowns(words, out, vocab))
            nbests.append(nb)
    return (outputs, nbests) if return_nbest else outputs


def write_nbest_jsonl(path, nbests: Sequence[NBest], vocab: Vocab) -> None:
    lines = []
    for nb in nbests:
        hyps = [
            {"tokens": vocab.decode(h.words), "l2r": h.l2r_score, "r2l": h.r2l_score, "final": h.final_score}
            for h in nb.hypotheses
        ]
        lines.append(json.dumps({"src": vocab.decode(nb.source), "hyps": hyps}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_nbest_jsonl(path, vocab: Vocab) -> list[NBest]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        hyps = [Hypothesis(vocab.encode(h["tokens"]) + [EOS], h["l2r"], h.get("r2l"), h.get("final"))
                for h in d["hyps"]]
        out.append(NBest(vocab.encode(d["src"]), hyps))
    return out
