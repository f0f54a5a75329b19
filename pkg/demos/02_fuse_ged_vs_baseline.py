"""
Fusing a GED-tuned masked LM into a GEC model
=============================================

Three stages at toy scale:

1. pretrain a small masked LM on clean text,
2. fine-tune it as a token-level error detector,
3. train an encoder-decoder corrector that attends to the frozen detector's
   final hidden states in every layer, next to a plain corrector.

Sizes are chosen so the script finishes in a few minutes on one core; the
numbers are illustrative only.  Drop-net at its default rate (each training
sequence sees only one attention branch) slows early training, and at this
schedule it costs more than it gives; ``gecfuse experiment`` trains 10k pairs
for 40 epochs, where the default rate comes out ahead.  The fused model is
therefore shown both with drop-net off and at the default.
"""

import time

from gecfuse.data import gen_clean_sentences, gen_synthetic_corpus, remove_uncorrected
from gecfuse.decoding import correct_sentences
from gecfuse.evaluation import evaluate
from gecfuse.gec_model import GecTrainConfig, build_gec_model, train_gec
from gecfuse.mlm import (
    GedExample,
    GedTrainConfig,
    MlmTrainConfig,
    finetune_ged,
    ged_metrics,
    init_mlm,
    pretrain_mlm,
)
from gecfuse.transformer import TransformerConfig
from gecfuse.vocab import build_vocab

t0 = time.time()
train = gen_synthetic_corpus(3000, rng_seed=1)
test = gen_synthetic_corpus(300, rng_seed=3)
clean = gen_clean_sentences(8000, rng_seed=4)
vocab = build_vocab([e.target for e in train] + clean, 300)
cfg = TransformerConfig(vocab_size=len(vocab), d_model=32, n_heads=4, d_ff=64, n_layers=2, max_len=48)

# 1. masked LM on clean text; learned positions like the original encoder
mlm = init_mlm(cfg.with_(positional="learned"), seed=0)
mlm, hist = pretrain_mlm([vocab.encode(s) for s in clean], mlm, MlmTrainConfig(epochs=3))
print(f"MLM dev loss {hist.epochs[-1]['dev_loss']:.3f}")

# 2. error detection: label 1 on every source token an edit touches
ged_train = [GedExample(vocab.encode(e.source), e.ged_labels) for e in train]
ged, _ = finetune_ged(mlm, ged_train, GedTrainConfig(epochs=3, learning_rate=5e-4))
m = ged_metrics(ged, [GedExample(vocab.encode(e.source), e.ged_labels) for e in test])
print(f"GED held-out accuracy {m['accuracy']:.3f}, F1 {m['f1']:.3f}")

# 3. correctors; uncorrected pairs are dropped from training
pairs = [(vocab.encode(e.source), vocab.encode(e.target)) for e in remove_uncorrected(train)[0]]
tcfg = GecTrainConfig(epochs=20, max_tokens=400)
reports = {}
runs = {
    "none": ("none", None, 0.0),
    "fuse-ged p=0": ("fuse-ged", ged, 0.0),
    "fuse-ged p=1": ("fuse-ged", ged, 1.0),
}
for name, (mode, source_mlm, rate) in runs.items():
    model = build_gec_model(cfg, mode, source_mlm, seed=0, drop_net_rate=rate)
    model, _ = train_gec(model, pairs, pairs[:200], tcfg)
    outs = correct_sentences(model, vocab, [e.source for e in test], beam_size=5)
    reports[name] = evaluate(outs, [e.source for e in test], [e.target for e in test], [e.edits for e in test])

for name, rep in reports.items():
    print(f"{name:<13} P={rep.precision:.3f} R={rep.recall:.3f} F0.5={rep.f_half:.3f} "
          f"GLEU={rep.gleu:.3f} EM={rep.exact_match_rate:.3f}")

print("\nF0.5 by type " + "".join(f"{name:>14}" for name in reports))
for t in sorted(reports["none"].per_type):
    print(f"  {t:<11}" + "".join(f"{rep.per_type.get(t, {'f_half': 0.0})['f_half']:>14.3f}"
                                 for rep in reports.values()))
print(f"\n{time.time() - t0:.0f}s")
