"""GEC examples, the synthetic corpus generator, pseudo-data and file formats.

File formats
------------
* parallel corpus: UTF-8 TSV, ``source<TAB>target`` per line, tokens space-separated
* gold edits sidecar: one JSON array per line, ``[{"span": [s, e], "rep": [...], "type": tag}, ...]``
* GED corpus: ``token<SPACE>label`` per line, blank line between sentences
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .alignment import Edit, apply_edits, derive_ged_labels, edit_target_spans, extract_edits
from .grammar import DEFAULT_PROFILE, Grammar, inject_errors

log = logging.getLogger(__name__)


@dataclass
class GecExample:
    source: list[str]
    target: list[str]
    edits: list[Edit] = field(default_factory=list)
    ged_labels: list[int] | None = None

    def __post_init__(self):
        if self.ged_labels is not None and len(self.ged_labels) != len(self.source):
            raise ValueError("ged_labels must have one label per source token")

    @property
    def error_type_tags(self) -> list[str]:
        return [e.type_tag for e in self.edits]

    @property
    def is_identical(self) -> bool:
        return self.source == self.target

    def validate(self) -> None:
        rebuilt = apply_edits(self.source, self.edits)
        if rebuilt != self.target:
            raise ValueError(f"gold edits do not turn {self.source} into {self.target} (got {rebuilt})")


def _type_edits(source, target, injections) -> list[Edit]:
    """Merge-normalised gold edits, each tagged with the injection that caused it."""
    out = []
    anchors = [(inj.anchor, inj.type_tag) for inj in injections]
    for s0, s1, t0, t1 in edit_target_spans(source, target):
        window = range(t0, t1) if t1 > t0 else range(t0 - 1, t0 + 1)
        tag = next((tt for a, tt in anchors if a in window), "OTHER")
        out.append(Edit(s0, s1, tuple(target[t0:t1]), tag))
    return out


def gen_synthetic_corpus(n_sentences: int, error_profile: dict[str, float] | None = None, rng_seed: int = 0,
                         grammar_seed: int = 0) -> list[GecExample]:
    """Generate ``n_sentences`` (erroneous source, clean target) pairs with typed gold edits."""
    profile = DEFAULT_PROFILE if error_profile is None else error_profile
    grammar = Grammar(grammar_seed)
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(n_sentences):
        tagged = grammar.sentence(rng)
        target = [w for w, _ in tagged]
        source, injections = inject_errors(tagged, profile, grammar, rng)
        edits = _type_edits(source, target, injections)
        out.append(GecExample(source, target, edits, derive_ged_labels(source, target)))
    return out


def gen_clean_sentences(n_sentences: int, rng_seed: int = 0, grammar_seed: int = 0) -> list[list[str]]:
    grammar = Grammar(grammar_seed)
    rng = np.random.default_rng(rng_seed)
    return [[w for w, _ in grammar.sentence(rng)] for _ in range(n_sentences)]


def remove_uncorrected(examples: Sequence[GecExample]) -> tuple[list[GecExample], int]:
    """Drop pairs whose source already equals the target; returns ``(kept, n_dropped)``."""
    kept = [e for e in examples if not e.is_identical]
    return kept, len(examples) - len(kept)


# ------------------------------------------------------------------ pseudo-data


def char_noise(text: str, rate: float, rng: np.random.Generator) -> tuple[str, int]:
    """Per-character noise: substitution, deletion, insertion or transposition, chosen uniformly.

    Returns ``(noised_text, number_of_noised_characters)``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("char_error_rate must lie in [0, 1)")
    letters = "abcdefghijklmnopqrstuvwxyz"
    chars = list(text)
    out: list[str] = []
    hits = 0
    i = 0
    while i < len(chars):
        c = chars[i]
        if rng.random() >= rate:
            out.append(c)
            i += 1
            continue
        hits += 1
        op = rng.integers(4)
        if op == 0:
            out.append(letters[rng.integers(26)])
        elif op == 1:
            pass
        elif op == 2:
            out.extend([c, letters[rng.integers(26)]])
        elif i + 1 < len(chars):
            out.extend([chars[i + 1], c])
            i += 1
        else:
            out.append(c)
        i += 1
    return "".join(out), hits


def gen_pseudo(clean_sentences: Sequence[Sequence[str]], reverse_model: Callable[[list[str]], list[str]] | None = None,
               char_error_rate: float = 0.0, rng_seed: int = 0, error_profile: dict[str, float] | None = None,
               grammar_seed: int = 0) -> list[GecExample]:
    """Pseudo (noisy, clean) pairs from clean sentences.

    ``reverse_model`` maps a clean token list to a noisy one (for instance a
    target-to-source GEC model wrapped with a decoder).  Without it, the
    rule-based injector is applied using ``error_profile`` (all rates zero
    when omitted).  Character noise is applied to the detokenised string,
    which is then split on whitespace again.
    """
    if not 0.0 <= char_error_rate < 1.0:
        raise ValueError("char_error_rate must lie in [0, 1)")
    rng = np.random.default_rng(rng_seed)
    grammar = Grammar(grammar_seed)
    profile = error_profile or {}
    out = []
    for clean in clean_sentences:
        clean = list(clean)
        if reverse_model is not None:
            noisy = list(reverse_model(clean))
        elif any(profile.values()):
            tagged = [(w, _guess_tag(w, grammar)) for w in clean]
            noisy, _ = inject_errors(tagged, profile, grammar, rng)
        else:
            noisy = list(clean)
        if char_error_rate > 0:
            text, _ = char_noise(" ".join(noisy), char_error_rate, rng)
            noisy = text.split()
        if not noisy:
            noisy = list(clean)
        out.append(GecExample(noisy, clean, extract_edits(noisy, clean), derive_ged_labels(noisy, clean)))
    return out


def _guess_tag(word: str, grammar: Grammar) -> str:
    from .grammar import ADJECTIVES, DET_PL, DET_SG, PREPOSITIONS, PUNCT

    if word in PREPOSITIONS:
        return "PREP"
    if word in PUNCT:
        return "PUNCT"
    if word in DET_SG or word in DET_PL:
        return "DET"
    if word in grammar.lemma_of:
        return "VERB"
    if word in ADJECTIVES:
        return "ADJ"
    return "NOUN"


# ------------------------------------------------------------------ file io


@dataclass
class LoadedCorpus:
    examples: list[GecExample]
    n_dropped: int = 0

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


def write_parallel_corpus(path, examples: Iterable[GecExample]) -> None:
    lines = []
    for ex in examples:
        for tok in ex.source + ex.target:
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f"token {tok!r} cannot be written to a space-separated TSV")
        lines.append(" ".join(ex.source) + "\t" + " ".join(ex.target) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def write_gold_edits(path, examples: Iterable[GecExample]) -> None:
    Path(path).write_text(
        "".join(json.dumps([e.to_json() for e in ex.edits]) + "\n" for ex in examples), encoding="utf-8"
    )


def load_gold_edits(path) -> list[list[Edit]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        try:
            out.append([Edit.from_json(d) for d in json.loads(line)])
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed gold edit line ({exc})") from exc
    return out


def load_parallel_corpus(path, drop_identical: bool = True, edits_path=None) -> LoadedCorpus:
    """Read a TSV corpus.  With ``drop_identical``, uncorrected pairs are removed.

    Gold edits come from ``edits_path`` when given (and are checked against
    each pair), otherwise they are extracted from the alignment.
    """
    text = Path(path).read_text(encoding="utf-8")
    gold = load_gold_edits(edits_path) if edits_path is not None else None
    examples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'source<TAB>target', found {len(parts) - 1} tabs")
        src, tgt = parts[0].split(), parts[1].split()
        if not src or not tgt:
            raise ValueError(f"{path}:{lineno}: empty source or target")
        edits = gold[lineno - 1] if gold is not None else extract_edits(src, tgt)
        ex = GecExample(src, tgt, edits, derive_ged_labels(src, tgt))
        try:
            ex.validate()
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        examples.append(ex)
    if gold is not None and len(gold) != len(examples):
        raise ValueError(f"{edits_path} has {len(gold)} lines but {path} has {len(examples)} pairs")
    n_dropped = 0
    if drop_identical:
        kept = [e for e in examples if not e.is_identical]
        n_dropped = len(examples) - len(kept)
        examples = kept
        log.info("dropped %d uncorrected pairs from %s", n_dropped, path)
    return LoadedCorpus(examples, n_dropped)


def write_ged_corpus(path, sentences: Iterable[tuple[Sequence[str], Sequence[int]]]) -> None:
    blocks = []
    for tokens, labels in sentences:
        if len(tokens) != len(labels):
            raise ValueError("GED tokens and labels differ in length")
        blocks.append("".join(f"{t} {int(l)}\n" for t, l in zip(tokens, labels)))
    Path(path).write_text("\n".join(blocks), encoding="utf-8")


def load_ged_corpus(path) -> list[tuple[list[str], list[int]]]:
    out, tokens, labels = [], [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            if tokens:
                out.append((tokens, labels))
                tokens, labels = [], []
            continue
        parts = line.split(" ")
        if len(parts) != 2 or parts[1] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'token label' with label 0 or 1")
        tokens.append(parts[0])
        labels.append(int(parts[1]))
    if tokens:
        out.append((tokens, labels))
    return out
