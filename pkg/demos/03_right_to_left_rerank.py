"""
Re-ranking an n-best list with right-to-left models
===================================================

A left-to-right corrector proposes ``beam`` candidates; a corrector trained
on reversed targets scores each candidate from the other end, and the list
is re-sorted by the sum of both log-probabilities.
"""

from gecfuse.data import gen_synthetic_corpus, remove_uncorrected
from gecfuse.decoding import beam_search_batch, rerank, restore_unknowns
from gecfuse.evaluation import evaluate
from gecfuse.gec_model import GecTrainConfig, build_gec_model, train_gec
from gecfuse.transformer import TransformerConfig
from gecfuse.vocab import build_vocab

train = gen_synthetic_corpus(4000, rng_seed=11)
test = gen_synthetic_corpus(200, rng_seed=12)
vocab = build_vocab([e.target for e in train], 300)
cfg = TransformerConfig(vocab_size=len(vocab), d_model=32, n_heads=4, d_ff=64, n_layers=2, max_len=48)
pairs = [(vocab.encode(e.source), vocab.encode(e.target)) for e in remove_uncorrected(train)[0]]

# one model per direction; the R2L model only differs by reversing targets
tcfg = GecTrainConfig(epochs=20, max_tokens=400)
l2r, _ = train_gec(build_gec_model(cfg, "none", seed=0), pairs, pairs[:200], tcfg)
r2l, _ = train_gec(build_gec_model(cfg, "none", seed=1, reverse_target=True), pairs, pairs[:200], tcfg)

sources = [vocab.encode(e.source) for e in test]
nbests = beam_search_batch([l2r], sources, beam_size=5)
l2r_best = [list(nb.best.words) for nb in nbests]  # rerank re-sorts the lists in place
reranked = [rerank(nb, [l2r], [r2l], n_models=1) for nb in nbests]

# one list in detail: scores before and after
nb = reranked[0]
print("source:", " ".join(test[0].source))
for h in nb.hypotheses:
    print(f"  l2r {h.l2r_score:8.3f}  r2l {h.r2l_score:8.3f}  sum {h.final_score:8.3f}  "
          f"{' '.join(vocab.decode(h.words))}")


def text(best_words):
    return [restore_unknowns(e.source, vocab.decode(w), vocab) for e, w in zip(test, best_words)]


refs, srcs, gold = [e.target for e in test], [e.source for e in test], [e.edits for e in test]
before = evaluate(text(l2r_best), srcs, refs, gold)
after = evaluate(text([nb.best.words for nb in reranked]), srcs, refs, gold)
print(f"\nL2R only    F0.5={before.f_half:.3f}  EM={before.exact_match_rate:.3f}")
print(f"L2R + R2L   F0.5={after.f_half:.3f}  EM={after.exact_match_rate:.3f}")
changed = sum(a != list(b.best.words) for a, b in zip(l2r_best, reranked))
print(f"re-ranking changed the winner in {changed} of {len(test)} sentences")
