"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the terminal summary.
Criteria 9 and 10 share one full-size experiment run; set
``GECFUSE_ACCEPTANCE_RUN`` to a directory to keep (and resume) that run
across sessions.  Its runtime is judged from the recorded stage and cell
wall times, so a resumed run is measured the same way as a fresh one.
"""

import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from gecfuse.analysis import collect_probe_data, probe_separation
from gecfuse.checkpoint import file_hash
from gecfuse.data import Edit, gen_clean_sentences, gen_synthetic_corpus, remove_uncorrected
from gecfuse.decoding import beam_search, beam_search_batch, greedy_decode, rerank
from gecfuse.evaluation import edit_counts, f_beta, gleu_score
from gecfuse.gec_model import (
    GecTrainConfig,
    batch_loss,
    build_gec_model,
    drop_net_choices,
    drop_net_combine,
    encode,
    fuse_decoder_layer,
    fuse_encoder_layer,
    gec_forward,
    init_from_mlm,
    load_gec,
    save_gec,
    train_gec,
)
from gecfuse.harness import ExperimentConfig, build_probe_corpus, load_vocab, run_experiment
from gecfuse.mlm import (
    GedExample,
    GedTrainConfig,
    MlmTrainConfig,
    continue_mlm_training,
    finetune_ged,
    ged_metrics,
    init_mlm,
    load_mlm,
    mlm_representation,
    pretrain_mlm,
    save_mlm,
)
from gecfuse.tensor import Tensor, _log_softmax_np
from gecfuse.training import pad_batch
from gecfuse.transformer import TransformerConfig, decoder_layer, encoder_layer, norm
from gecfuse.vocab import BOS, EOS, build_vocab

from gradcheck import check_gradients

MODES = ("none", "init", "fuse-vanilla", "fuse-mask", "fuse-ged")


def _tiny_cfg(**kw):
    base = dict(vocab_size=14, d_model=8, n_heads=2, d_ff=8, n_layers=2, max_len=12, dropout_rate=0.0,
                dtype="float64")
    base.update(kw)
    return TransformerConfig(**base)


def _ged_mlm(cfg, seed):
    mlm = init_mlm(cfg, 100 + seed)
    mlm, _ = finetune_ged(mlm, [GedExample([5, 6, 7, 8], [0, 1, 0, 0])], GedTrainConfig(epochs=1))
    return mlm


@pytest.mark.criterion(1)
def test_gradient_integrity(verdict):
    t0 = time.perf_counter()
    cfg = _tiny_cfg()
    model = build_gec_model(cfg, "fuse-ged", _ged_mlm(cfg, 0), seed=1)
    src = np.array([[5, 6, 7, 8]])
    tin, tout = np.array([[BOS, 9, 10, 11]]), np.array([[9, 10, 11, EOS]])
    # h = 1e-5: the O(h^2) truncation of h = 1e-4 is visible against the floor on near-zero gradients
    errs = check_gradients(lambda: batch_loss(model, src, tin, tout, 0.1), model.params, h=1e-5)
    seconds = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and seconds < 60 and set(errs) == set(model.params)
    verdict.record(ok, f"{len(errs)} tensors, worst rel err {errs[worst]:.2e} ({worst}), {seconds:.1f}s")
    assert ok


@pytest.mark.criterion(2)
def test_fusion_identities(verdict):
    cfg = _tiny_cfg(n_layers=1)
    model = build_gec_model(cfg, "fuse-vanilla", init_mlm(cfg, 3), seed=4)
    rng = np.random.default_rng(0)
    p = dict(model.params)
    for side, src_name in (("enc", "self_attn"), ("dec", "cross_attn")):
        for w in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo"):
            p[f"{side}.layer0.bert_attn.{w}"] = p[f"{side}.layer0.{src_name}.{w}"]

    h = Tensor(rng.normal(size=(2, 5, 8)))
    # MLM features equal to the self-attention input make both encoder branches identical
    enc_fused = fuse_encoder_layer(h, norm(h, p, "enc.layer0.ln1"), p, 0, cfg).data
    enc_plain = encoder_layer(h, p, "enc.layer0", cfg, None, False, None, 0.0).data
    s, h_top = Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 5, 8)))
    dec_fused = fuse_decoder_layer(s, h_top, h_top, p, 0, cfg).data
    dec_plain = decoder_layer(s, h_top, p, "dec.layer0", cfg, None, None, False, None, 0.0).data
    branch_err = max(np.abs(enc_fused - enc_plain).max(), np.abs(dec_fused - dec_plain).max())

    a, b = Tensor(rng.normal(size=(4, 3, 8))), Tensor(rng.normal(size=(4, 3, 8)))
    exact = all(np.array_equal(drop_net_combine(a, b, rate, False).data, (a.data + b.data) * 0.5)
                for rate in (0.0, 0.5, 1.0))
    ok = branch_err < 1e-6 and exact
    verdict.record(ok, f"equal-branch max diff {branch_err:.1e}; inference drop-net is the exact mean: {exact}")
    assert ok


@pytest.mark.criterion(3)
def test_drop_net_sampling(verdict):
    full = drop_net_choices(1.0, 10_000, np.random.default_rng(0))
    frac_h = float(np.mean(full == 1))
    never_avg = bool(np.all(full != 0))
    zero = drop_net_choices(0.0, 10_000, np.random.default_rng(1))
    # p = 0 through the combine path in training mode: every row is the mean
    a, b = Tensor(np.zeros((10_000, 1, 2))), Tensor(np.ones((10_000, 1, 2)))
    mixed = drop_net_combine(a, b, 0.0, True, np.random.default_rng(2)).data
    always_avg = bool(np.all(zero == 0) and np.all(mixed == 0.5))
    ok = abs(frac_h - 0.5) <= 0.02 and never_avg and always_avg
    verdict.record(ok, f"p=1: GEC-only share {frac_h:.4f}; p=0: always average {always_avg}")
    assert ok


@pytest.mark.criterion(4)
def test_init_fidelity(verdict):
    cfg = TransformerConfig(vocab_size=60, d_model=64, n_heads=4, d_ff=128, n_layers=2, max_len=48,
                            positional="learned")
    mlm = init_mlm(cfg, 7)
    gec = init_from_mlm(mlm, cfg, seed=8)
    rng = np.random.default_rng(9)
    src = pad_batch([list(rng.integers(5, 60, size=n)) for n in (3, 11, 20, 7)])
    ours = encode(gec, src).memory.data
    ref = mlm_representation(src, mlm).data
    real = src != 0
    err = float(np.abs(ours - ref)[real].max())
    verdict.record(err < 1e-6, f"max |GEC encoder - MLM| = {err:.1e} over {int(real.sum())} tokens")
    assert err < 1e-6


# ---------------------------------------------------------------- criterion 5

def _decode_cfg():
    return TransformerConfig(vocab_size=8, d_model=8, n_heads=2, d_ff=16, n_layers=1, max_len=12,
                             dropout_rate=0.0, dtype="float64")


def _sharp(model):
    model.params["dec.ln_f.g"] = Tensor(model.params["dec.ln_f.g"].data * 6.0, requires_grad=True)
    return model


def _oracle_logp(models, src, seq):
    prefix = [BOS] + list(seq[:-1])
    mean = np.mean([_log_softmax_np(gec_forward(src, prefix, m).data) for m in models], axis=0)
    return float(sum(mean[i, t] for i, t in enumerate(seq)))


def _reverse_words(seq):
    return list(seq[:-1])[::-1] + [EOS] if seq and seq[-1] == EOS else list(seq)[::-1]


@pytest.mark.criterion(5)
def test_decoding_exactness(verdict):
    # beam 1 against greedy on random sentences, plain and fused
    cfg = TransformerConfig(vocab_size=30, d_model=16, n_heads=2, d_ff=32, n_layers=2, max_len=24, dropout_rate=0.0,
                            dtype="float64")
    rng = np.random.default_rng(0)
    sources = [list(rng.integers(5, 30, size=int(rng.integers(1, 11)))) for _ in range(100)]
    greedy_ok = 0
    for i, src in enumerate(sources):
        mode = "none" if i % 2 else "fuse-vanilla"
        m = _sharp(build_gec_model(cfg, mode, init_mlm(cfg, i) if mode != "none" else None, seed=i % 7))
        greedy_ok += beam_search(m, src, beam_size=1, max_len=12).best.tokens == greedy_decode(m, src, 12)

    # five emittable tokens (EOS, UNK and three words), at most four generated tokens
    small = _decode_cfg()
    words = (3, 5, 6, 7)
    space = [list(w) + [EOS] for n in range(4) for w in itertools.product(words, repeat=n)]
    space += [list(w) for w in itertools.product(words, repeat=4)]
    exhaustive_ok = rerank_ok = 0
    trials = 0
    for seed in range(3):
        l2r = [_sharp(build_gec_model(small, "none", seed=seed)), _sharp(build_gec_model(small, "none", seed=10 + seed))]
        r2l = [_sharp(build_gec_model(small, "none", seed=20 + seed + k, reverse_target=True)) for k in range(2)]
        src = [5, 7, 6][: seed + 1]
        nb = beam_search_batch(l2r, [src], beam_size=512, max_len=4)[0]
        oracle = {tuple(s): _oracle_logp(l2r, src, s) for s in space}
        found = sorted(tuple(h.tokens) for h in nb.hypotheses)
        exhaustive_ok += found == sorted(oracle) and tuple(nb.best.tokens) == max(oracle, key=oracle.get) and all(
            abs(h.l2r_score - oracle[tuple(h.tokens)]) < 1e-9 for h in nb.hypotheses)
        summed = {s: v + _oracle_logp(r2l, src, _reverse_words(list(s))) for s, v in oracle.items()}
        ranked = rerank(nb, l2r, r2l, n_models=2)
        rerank_ok += tuple(ranked.best.tokens) == max(summed, key=summed.get)
        trials += 1
    ok = greedy_ok == 100 and exhaustive_ok == trials and rerank_ok == trials
    verdict.record(ok, f"beam-1 == greedy {greedy_ok}/100; exhaustive beam exact {exhaustive_ok}/{trials} "
                       f"over {len(space)} sequences; rerank winner exact {rerank_ok}/{trials}")
    assert ok


# ---------------------------------------------------------------- criterion 6

def _direct_gleu(sources, hyps, refs, max_n=4):
    log_sum = 0.0
    for n in range(1, max_n + 1):
        num = den = 0
        for s, h, r in zip(sources, hyps, refs):
            grams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            s_grams = [tuple(s[i:i + n]) for i in range(len(s) - n + 1)]
            r_grams = [tuple(r[i:i + n]) for i in range(len(r) - n + 1)]
            den += len(grams)
            for g in set(grams):
                hc, rc, sc = grams.count(g), r_grams.count(g), s_grams.count(g)
                num += max(0, min(hc, rc) - min(hc, max(0, sc - rc)))
        if num == 0 or den == 0:
            return 0.0
        log_sum += math.log(num / den)
    c, r = sum(map(len, hyps)), sum(map(len, refs))
    return (1.0 if c >= r else math.exp(1 - r / c)) * math.exp(log_sum / max_n)


@pytest.mark.criterion(6)
def test_metrics(verdict):
    f = f_beta(1, 0, 4)
    f_ok = round(f, 4) == 0.5556
    # source, hypothesis and reference all equal: nothing for the source penalty to catch
    refs = gen_clean_sentences(50, rng_seed=1)
    identity = gleu_score(refs, refs, refs)
    counts = edit_counts([["a", "y", "c"]], [["a", "b", "c"]], [[Edit(1, 2, ("x",))]])
    src = [["the", "cat", "sit", "on", "mat"], ["he", "go", "to", "school", "yesterday"], ["a", "b", "c", "d"]]
    hyp = [["the", "cat", "sat", "on", "mat"], ["he", "go", "to", "the", "school", "yesterday"], ["a", "b", "c", "d"]]
    ref = [["the", "cat", "sat", "on", "the", "mat"], ["he", "went", "to", "school", "yesterday"],
           ["a", "b", "c", "d"]]
    g, oracle = gleu_score(src, hyp, ref), _direct_gleu(src, hyp, ref)
    ok = f_ok and identity == 1.0 and counts == (0, 1, 1) and abs(g - oracle) < 1e-9
    verdict.record(ok, f"F0.5(P=1,R=0.2)={f:.4f}; identity GLEU={identity}; hand counts {counts}; "
                       f"GLEU {g:.6f} vs oracle {oracle:.6f}")
    assert ok


# ---------------------------------------------------------------- criterion 7

@pytest.mark.criterion(7)
def test_overfit_every_mode(verdict):
    corpus = remove_uncorrected(gen_synthetic_corpus(200, rng_seed=70))[0][:32]
    clean = gen_clean_sentences(2000, rng_seed=71)
    vocab = build_vocab([e.target for e in corpus] + clean, 300)
    cfg = TransformerConfig(vocab_size=len(vocab), d_model=32, n_heads=4, d_ff=64, n_layers=2, max_len=48,
                            dropout_rate=0.1)
    pairs = [(vocab.encode(e.source), vocab.encode(e.target)) for e in corpus]
    mlm, _ = pretrain_mlm([vocab.encode(s) for s in clean], init_mlm(cfg.with_(positional="learned"), 0),
                          MlmTrainConfig(epochs=2))
    mlms = {
        "mlm": mlm,
        "mlm_mask_adapted": continue_mlm_training(mlm, [s for s, _ in pairs], MlmTrainConfig(epochs=1))[0],
        "mlm_ged": finetune_ged(mlm, [GedExample(vocab.encode(e.source), e.ged_labels) for e in corpus],
                                GedTrainConfig())[0],
    }
    tcfg = GecTrainConfig(epochs=200, max_tokens=160, learning_rate=3e-3, min_learning_rate=1e-5, clip_norm=1.0)
    lines, ok = [], True
    for mode in MODES:
        t0 = time.perf_counter()
        model = build_gec_model(cfg, mode, mlms[{"none": "mlm", "init": "mlm", "fuse-vanilla": "mlm",
                                                 "fuse-mask": "mlm_mask_adapted", "fuse-ged": "mlm_ged"}[mode]],
                                seed=0)
        model, hist = train_gec(model, pairs, pairs, tcfg)
        best = beam_search_batch(model, [s for s, _ in pairs], beam_size=5, max_len=48)
        em = float(np.mean([nb.best.words == t for nb, (_, t) in zip(best, pairs)]))
        seconds = time.perf_counter() - t0
        ok &= em >= 0.95 and seconds < 600 and len(hist.epochs) <= 200
        lines.append(f"{mode} EM={em:.3f} ({len(hist.epochs)} ep, {seconds:.0f}s)")
    verdict.record(ok, "; ".join(lines))
    assert ok


# ---------------------------------------------------------------- criterion 8

@pytest.mark.criterion(8)
def test_ged_finetuning(verdict):
    clean = gen_clean_sentences(20_000, rng_seed=80)
    train = gen_synthetic_corpus(3000, rng_seed=81)
    held = gen_synthetic_corpus(1000, rng_seed=82)
    vocab = build_vocab([e.target for e in train] + clean, 300)
    cfg = TransformerConfig(vocab_size=len(vocab), d_model=64, n_heads=4, d_ff=128, n_layers=2, max_len=48,
                            positional="learned")
    mlm, _ = pretrain_mlm([vocab.encode(s) for s in clean], init_mlm(cfg, 0), MlmTrainConfig(epochs=3))
    ged, _ = finetune_ged(mlm, [GedExample(vocab.encode(e.source), e.ged_labels) for e in train], GedTrainConfig())
    m = ged_metrics(ged, [GedExample(vocab.encode(e.source), e.ged_labels) for e in held])
    labels = np.concatenate([e.ged_labels for e in held])
    majority = max(np.mean(labels), 1 - np.mean(labels))
    ok = m["accuracy"] >= 0.90
    verdict.record(ok, f"held-out token accuracy {m['accuracy']:.4f} (majority {majority:.4f}, F1 {m['f1']:.3f}); "
                       f"{len(train)} train sentences, 3 epochs, lr 4e-5, batch 32")
    assert ok


# ------------------------------------------------------------ criteria 9-10

@pytest.fixture(scope="module")
def main_run(tmp_path_factory):
    out = Path(os.environ.get("GECFUSE_ACCEPTANCE_RUN") or tmp_path_factory.mktemp("main_run"))
    cfg = ExperimentConfig()
    t0 = time.perf_counter()
    res = run_experiment(cfg, out)
    elapsed = time.perf_counter() - t0
    recorded = sum(json.loads(p.read_text())["wall_seconds"] for p in out.glob("cells/*/seed*/manifest.json"))
    for p in out.glob("seed*/stages.json"):
        recorded += sum(stage["seconds"] for stage in json.loads(p.read_text()).values())
    return cfg, out, res, max(elapsed, recorded)


@pytest.mark.criterion(10)
def test_directional_table(verdict, main_run):
    cfg, out, res, seconds = main_run
    assert not res.errors, res.errors
    f = {m: res.mean_f05(m) for m in cfg.modes}
    ok = f["fuse-ged"] > f["none"] and f["fuse-ged"] >= f["fuse-vanilla"] and seconds <= 7200
    trend = " ".join(f"{m}={f[m]:.4f}" for m in MODES)
    verdict.record(ok, f"mean F0.5 over {len(cfg.seeds)} seeds: {trend}; runtime {seconds / 60:.1f} min")
    assert ok


@pytest.mark.criterion(9)
def test_probe_direction(verdict, main_run):
    cfg, out, _, _ = main_run
    vocab = load_vocab(out / "data" / "vocab.json")
    corpus = build_probe_corpus(cfg, 20_000)
    gaps, lines = [], []
    for seed in cfg.seeds:
        acc = {}
        for kind in ("mlm", "mlm_ged"):
            ds = collect_probe_data(load_mlm(out / f"seed{seed}" / f"{kind}.ckpt"), corpus, vocab, top_k=8,
                                    min_error_count=50, seed=seed)
            acc[kind] = probe_separation(ds, seed=seed).accuracy
        gaps.append(acc["mlm_ged"] - acc["mlm"])
        lines.append(f"s{seed} {acc['mlm']:.3f}->{acc['mlm_ged']:.3f}")
    mean_gap = float(np.mean(gaps))
    ok = mean_gap >= 0.05
    verdict.record(ok, f"mean probe gain {100 * mean_gap:.1f} pp ({', '.join(lines)})")
    assert ok


# --------------------------------------------------------------- criterion 11

@pytest.mark.criterion(11)
def test_reproducible_results(verdict, tmp_path):
    cfg = ExperimentConfig(
        seeds=[0, 1], n_train=300, n_dev=60, n_test=60, n_clean=600,
        model=dict(d_model=16, n_heads=2, d_ff=32, n_layers=2, max_len=48, dropout_rate=0.1),
        mlm_train=dict(epochs=1), mask_adapt=dict(epochs=1), ged_train=dict(epochs=1, learning_rate=5e-4),
        gec_train=dict(epochs=3), beam_size=3,
    )
    a = run_experiment(cfg, tmp_path / "a").results_path.read_bytes()
    b = run_experiment(cfg, tmp_path / "b").results_path.read_bytes()
    rows = a.decode().count("\n") - 1
    ok = a == b and rows == len(cfg.modes) * (len(cfg.seeds) + 1)
    verdict.record(ok, f"two fresh runs ({len(cfg.modes)} modes x {len(cfg.seeds)} seeds, reduced size): "
                       f"results.csv byte-identical {a == b}")
    assert ok


# --------------------------------------------------------------- criterion 12

@pytest.mark.criterion(12)
def test_checkpoint_round_trip(verdict, tmp_path):
    cfg = TransformerConfig(vocab_size=40, d_model=16, n_heads=2, d_ff=32, n_layers=2, max_len=24,
                            positional="learned")
    mlm = finetune_ged(init_mlm(cfg, 0), [GedExample([5, 6, 7], [0, 1, 0])], GedTrainConfig(epochs=1))[0]
    save_mlm(mlm, tmp_path / "m1.ckpt")
    save_mlm(load_mlm(tmp_path / "m1.ckpt"), tmp_path / "m2.ckpt")
    mlm_same = (tmp_path / "m1.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()

    rng = np.random.default_rng(1)
    pairs = [(list(rng.integers(5, 40, size=6)), list(rng.integers(5, 40, size=5))) for _ in range(16)]
    model = build_gec_model(cfg.with_(positional="sinusoidal"), "fuse-ged", mlm, seed=2)
    model, _ = train_gec(model, pairs, pairs[:4], GecTrainConfig(epochs=2, max_tokens=64))
    save_mlm(mlm, tmp_path / "m3.ckpt")
    frozen = file_hash(tmp_path / "m1.ckpt") == file_hash(tmp_path / "m3.ckpt")

    save_gec(model, tmp_path / "g1.ckpt")
    save_gec(load_gec(tmp_path / "g1.ckpt", load_mlm(tmp_path / "m1.ckpt")), tmp_path / "g2.ckpt")
    gec_same = (tmp_path / "g1.ckpt").read_bytes() == (tmp_path / "g2.ckpt").read_bytes()
    ok = mlm_same and gec_same and frozen
    verdict.record(ok, f"MLM save-load-save identical {mlm_same}; GEC identical {gec_same}; "
                       f"MLM hash unchanged by fuse training {frozen}")
    assert ok
