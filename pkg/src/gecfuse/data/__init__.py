"""Synthetic GEC data: grammar, error injection, alignment, file formats."""

from .alignment import EDIT_TYPES, Edit, align, apply_edits, derive_ged_labels, extract_edits
from .corpus import (
    GecExample,
    LoadedCorpus,
    char_noise,
    gen_clean_sentences,
    gen_pseudo,
    gen_synthetic_corpus,
    load_ged_corpus,
    load_gold_edits,
    load_parallel_corpus,
    remove_uncorrected,
    write_ged_corpus,
    write_gold_edits,
    write_parallel_corpus,
)
from .grammar import DEFAULT_PROFILE, Grammar
from ..vocab import Vocab, build_vocab

__all__ = [
    "EDIT_TYPES", "Edit", "align", "apply_edits", "derive_ged_labels", "extract_edits",
    "GecExample", "LoadedCorpus", "char_noise", "gen_clean_sentences", "gen_pseudo", "gen_synthetic_corpus",
    "load_ged_corpus", "load_gold_edits", "load_parallel_corpus", "remove_uncorrected", "write_ged_corpus",
    "write_gold_edits", "write_parallel_corpus", "DEFAULT_PROFILE", "Grammar", "Vocab", "build_vocab",
]
