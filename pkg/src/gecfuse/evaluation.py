"""Correction metrics: edit-level P/R/F0.5, GLEU, exact match and a per-type breakdown.

Edit scoring is deterministic: system edits come from the one fixed
alignment in :mod:`gecfuse.data.alignment`, and a system edit counts as
correct iff a gold edit has the same span and replacement.  Gold edits are
stored in the same merged form, so scoring the reference itself gives
P = R = 1.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .data.alignment import EDIT_TYPES, Edit, extract_edits


def f_beta(tp: int, fp: int, fn: int, beta: float = 0.5) -> float:
    """F-beta from counts; 0 when precision or recall is undefined or both are 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    if p == 0 and r == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * p * r / (b2 * p + r)


def _check_aligned(*lists) -> None:
    if len({len(x) for x in lists}) != 1:
        raise ValueError(f"inputs must be aligned lists of equal length, got {[len(x) for x in lists]}")


def _match(system_edits: Sequence[Edit], gold_edits: Sequence[Edit]):
    """Returns ``(matched_gold, unmatched_gold, false_positive_system)``; each gold edit matches once."""
    pool = {}
    for g in gold_edits:
        pool.setdefault(g.key(), []).append(g)
    matched, fps = [], []
    for e in system_edits:
        bucket = pool.get(e.key())
        if bucket:
            matched.append(bucket.pop(0))
        else:
            fps.append(e)
    unmatched = [g for bucket in pool.values() for g in bucket]
    return matched, unmatched, fps


def edit_counts(system_outputs, sources, gold_edits) -> tuple[int, int, int]:
    _check_aligned(system_outputs, sources, gold_edits)
    tp = fp = fn = 0
    for hyp, src, gold in zip(system_outputs, sources, gold_edits):
        matched, unmatched, fps = _match(extract_edits(src, hyp), gold)
        tp += len(matched)
        fp += len(fps)
        fn += len(unmatched)
    return tp, fp, fn


def m2_style_score(system_outputs, sources, gold_edits, beta: float = 0.5) -> tuple[float, float, float]:
    """Corpus-level (micro-averaged) precision, recall and F-beta."""
    tp, fp, fn = edit_counts(system_outputs, sources, gold_edits)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, f_beta(tp, fp, fn, beta)


def per_type_breakdown(system_outputs, sources, gold_edits, beta: float = 0.5) -> dict[str, dict]:
    """Per gold type counts; false positives have no gold type and are booked under OTHER."""
    _check_aligned(system_outputs, sources, gold_edits)
    counts = {t: Counter() for t in EDIT_TYPES}
    for hyp, src, gold in zip(system_outputs, sources, gold_edits):
        matched, unmatched, fps = _match(extract_edits(src, hyp), gold)
        for g in matched:
            counts[g.type_tag]["tp"] += 1
        for g in unmatched:
            counts[g.type_tag]["fn"] += 1
        counts["OTHER"]["fp"] += len(fps)
    out = {}
    for t, c in counts.items():
        tp, fp, fn = c["tp"], c["fp"], c["fn"]
        if tp + fp + fn:
            out[t] = {"tp": tp, "fp": fp, "fn": fn, "f_half": f_beta(tp, fp, fn, beta)}
    return out


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def gleu_score(sources, system_outputs, references, max_n: int = 4) -> float:
    """Single-reference corpus GLEU.

    For each order n the numerator sums, over hypothesis n-gram types,
    ``max(0, min(h, r) - min(h, max(0, s - r)))``: matches with the reference
    minus hypothesis n-grams that were in the source but not the reference.
    The denominator is the number of hypothesis n-grams.  No smoothing: any
    zero precision makes the score 0.
    """
    _check_aligned(sources, system_outputs, references)
    if not system_outputs or sum(len(h) for h in system_outputs) == 0:
        raise ValueError("GLEU needs a non-empty hypothesis corpus")
    num = [0] * max_n
    den = [0] * max_n
    hyp_len = ref_len = 0
    for src, hyp, ref in zip(sources, system_outputs, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r, s = _ngrams(hyp, n), _ngrams(ref, n), _ngrams(src, n)
            for g, hc in h.items():
                penalty = min(hc, max(0, s[g] - r[g]))
                num[n - 1] += max(0, min(hc, r[g]) - penalty)
            den[n - 1] += sum(h.values())
    if any(x == 0 for x in num) or any(d == 0 for d in den):
        return 0.0
    log_p = sum(math.log(x / d) for x, d in zip(num, den)) / max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def exact_match(system_outputs, references) -> float:
    _check_aligned(system_outputs, references)
    if not references:
        return 0.0
    return sum(list(h) == list(r) for h, r in zip(system_outputs, references)) / len(references)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_half: float
    gleu: float
    exact_match_rate: float
    per_type: dict[str, dict] = field(default_factory=dict)
    n_sentences: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def csv_row(self, seed: int, mode: str) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [seed, mode] + [f"{x:.6f}" for x in (self.precision, self.recall, self.f_half, self.gleu,
                                                  self.exact_match_rate)]
        )
        return buf.getvalue()


def evaluate(system_outputs, sources, references, gold_edits, beta: float = 0.5) -> EvalReport:
    p, r, f = m2_style_score(system_outputs, sources, gold_edits, beta)
    return EvalReport(
        precision=p,
        recall=r,
        f_half=f,
        gleu=gleu_score(sources, system_outputs, references),
        exact_match_rate=exact_match(system_outputs, references),
        per_type=per_type_breakdown(system_outputs, sources, gold_edits, beta),
        n_sentences=len(sources),
    )
