"""
A synthetic error-correction corpus
===================================

The generator writes grammatical sentences from a small closed grammar and
then injects rule-based errors.  Every injected error is kept as a gold edit,
so scoring never depends on an aligner guessing what the generator did.
"""

from collections import Counter

from gecfuse.data import (
    EDIT_TYPES,
    apply_edits,
    derive_ged_labels,
    extract_edits,
    gen_clean_sentences,
    gen_pseudo,
    gen_synthetic_corpus,
)

corpus = gen_synthetic_corpus(2000, rng_seed=0)

# a handful of pairs with their gold edits
for ex in corpus[:6]:
    print("src:", " ".join(ex.source))
    print("tgt:", " ".join(ex.target))
    for e in ex.edits:
        print(f"     [{e.start}:{e.end}] -> {' '.join(e.replacement) or '(delete)'}  {e.type_tag}")
    print()

# how often each error type fires under the default profile
counts = Counter(e.type_tag for ex in corpus for e in ex.edits)
print("edits per type:")
for t in EDIT_TYPES:
    print(f"  {t:<12} {counts[t]}")
print("identical pairs:", sum(ex.is_identical for ex in corpus), "of", len(corpus))

# the aligner recovers an edit set that rebuilds the target exactly
ex = next(e for e in corpus if len(e.edits) > 1)
found = extract_edits(ex.source, ex.target)
assert apply_edits(ex.source, found) == ex.target
print("\naligned edits:", found)
print("GED labels:  ", list(zip(ex.source, derive_ged_labels(ex.source, ex.target))))

# pseudo data: clean text with character noise on the source side
clean = gen_clean_sentences(3, rng_seed=1)
for ex in gen_pseudo(clean, char_error_rate=0.08, rng_seed=2):
    print("\nnoisy:", " ".join(ex.source))
    print("clean:", " ".join(ex.target))
