"""Token-level Levenshtein alignment, edit extraction and GED label derivation.

All costs are 1 except a match (0).  The backtrace runs from the end of both
sequences and, among equal-cost predecessors, prefers
match > substitution > deletion > insertion, so every pair of sequences has
exactly one alignment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

EDIT_TYPES = ("DEL_ART", "SUB_PREP", "VERB_SUFFIX", "PUNCT_DROP", "CHAR_TYPO", "OTHER")

# alignment op codes
MATCH, SUB, DEL, INS = "M", "S", "D", "I"


@dataclass(frozen=True)
class Edit:
    """Replace ``source[start:end]`` with ``replacement``.

    ``start == end`` is an insertion, an empty replacement a deletion.
    """

    start: int
    end: int
    replacement: tuple[str, ...] = ()
    type_tag: str = "OTHER"

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"bad edit span [{self.start}, {self.end})")
        if self.type_tag not in EDIT_TYPES:
            raise ValueError(f"unknown edit type {self.type_tag!r}")
        object.__setattr__(self, "replacement", tuple(self.replacement))

    @property
    def span(self) -> tuple[int, int]:
        return self.start, self.end

    def key(self) -> tuple:
        """Identity used for scoring: span and replacement, type ignored."""
        return self.start, self.end, self.replacement

    def to_json(self) -> dict:
        return {"span": [self.start, self.end], "rep": list(self.replacement), "type": self.type_tag}

    @classmethod
    def from_json(cls, d: dict) -> "Edit":
        return cls(int(d["span"][0]), int(d["span"][1]), tuple(d["rep"]), d.get("type", "OTHER"))


def align(source: Sequence, target: Sequence) -> list[tuple[str, int | None, int | None]]:
    """Return the alignment as ``(op, source_index, target_index)`` triples, left to right."""
    n, m = len(source), len(target)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        si = source[i - 1]
        row, prev = dist[i], dist[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (0 if si == target[j - 1] else 1)
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        here = dist[i, j]
        if i > 0 and j > 0 and source[i - 1] == target[j - 1] and dist[i - 1, j - 1] == here:
            ops.append((MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i - 1, j - 1] + 1 == here:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i - 1, j] + 1 == here:
            ops.append((DEL, i - 1, None))
            i -= 1
        else:
            ops.append((INS, None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def _edit_runs(source, target):
    """Yield ``(src_start, src_end, tgt_start, tgt_end)`` for maximal non-match runs."""
    ops = align(source, target)
    si = ti = 0
    run = None
    for op, s, t in ops + [(MATCH, None, None)]:
        if op == MATCH:
            if run is not None:
                yield run[0], si, run[1], ti
                run = None
            si += 1
            ti += 1
            continue
        if run is None:
            run = (si, ti)
        if op in (SUB, DEL):
            si += 1
        if op in (SUB, INS):
            ti += 1


def extract_edits(source: Sequence[str], target: Sequence[str]) -> list[Edit]:
    """Edits turning ``source`` into ``target``; adjacent non-match cells are merged."""
    target = list(target)
    return [Edit(s0, s1, tuple(target[t0:t1])) for s0, s1, t0, t1 in _edit_runs(source, target)]


def edit_target_spans(source: Sequence[str], target: Sequence[str]) -> list[tuple[int, int, int, int]]:
    """Like :func:`extract_edits` but returning source and target spans of each run."""
    return list(_edit_runs(source, list(target)))


def derive_ged_labels(source: Sequence, target: Sequence) -> list[int]:
    """1 for source tokens that are substituted or deleted in the alignment, else 0."""
    labels = [0] * len(source)
    for op, s, _ in align(source, target):
        if op in (SUB, DEL):
            labels[s] = 1
    return labels


def apply_edits(source: Sequence[str], edits: Sequence[Edit]) -> list[str]:
    out: list[str] = []
    cursor = 0
    for e in sorted(edits, key=lambda e: (e.start, e.end)):
        if e.start < cursor or e.end > len(source):
            raise ValueError(f"edit {e} overlaps another edit or runs past the source")
        out.extend(source[cursor : e.start])
        out.extend(e.replacement)
        cursor = e.end
    out.extend(source[cursor:])
    return out
