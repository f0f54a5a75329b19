"""Command-line entry point: ``gecfuse <subcommand> ...``.

Every subcommand accepts ``--seed`` and ``--out``.  Failures print a one-line
``error: <stage>: <message>`` to stderr and exit 1; argparse usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import collect_probe_data, probe_separation, project_2d, write_probe_summary, write_projection_csv
from .data.corpus import load_gold_edits, load_parallel_corpus
from .data.alignment import apply_edits
from .decoding import correct_sentences, rerank, restore_unknowns, write_nbest_jsonl
from .evaluation import evaluate
from .gec_model import GecTrainConfig, IntegrationMode, build_gec_model, load_gec, save_gec, train_gec
from .harness import ExperimentConfig, build_data, load_vocab, run_experiment, write_data
from .mlm import (
    GedExample,
    GedTrainConfig,
    MlmTrainConfig,
    continue_mlm_training,
    finetune_ged,
    init_mlm,
    load_mlm,
    pretrain_mlm,
    save_mlm,
)
from .transformer import TransformerConfig


class CliError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")


def _read_tokens(path) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def _write_tokens(path, sents) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sents), encoding="utf-8")


def _require(path, what: str, stage: str) -> Path:
    if path is None:
        raise CliError(stage, f"missing prerequisite: {what}")
    p = Path(path)
    if not p.exists():
        raise CliError(stage, f"missing prerequisite: {what} ({p} does not exist)")
    return p


def _model_config(args, vocab_size: int) -> TransformerConfig:
    return TransformerConfig(vocab_size=vocab_size, d_model=args.d_model, n_heads=args.n_heads, d_ff=args.d_ff,
                             n_layers=args.layers, max_len=args.max_len)


# ------------------------------------------------------------------ subcommands


def cmd_gen_data(args) -> None:
    cfg = ExperimentConfig(seeds=[args.seed], data_seed=args.seed, n_train=args.n_train, n_dev=args.n_dev,
                           n_test=args.n_test, n_clean=args.n_clean, vocab_size=args.vocab_size)
    write_data(build_data(cfg), Path(args.out))


def _load_data_dir(path, stage: str) -> tuple:
    d = _require(path, "data directory (run gen-data first)", stage)
    vocab = load_vocab(_require(d / "vocab.json", "vocab.json in the data directory", stage))
    return d, vocab


def cmd_pretrain_mlm(args) -> None:
    d, vocab = _load_data_dir(args.data, "pretrain-mlm")
    clean = [vocab.encode(s) for s in _read_tokens(d / "clean.txt")]
    cfg = _model_config(args, len(vocab)).with_(positional="learned")
    model, _ = pretrain_mlm(clean, init_mlm(cfg, args.seed), MlmTrainConfig(epochs=args.epochs, seed=args.seed))
    save_mlm(model, args.out)


def cmd_adapt_mlm(args) -> None:
    d, vocab = _load_data_dir(args.data, "adapt-mlm")
    mlm = load_mlm(_require(args.mlm, "pre-trained MLM checkpoint (--mlm)", "adapt-mlm"))
    train = load_parallel_corpus(d / "train.tsv", drop_identical=False)
    if args.mask:
        sources = [vocab.encode(e.source) for e in train]
        model, _ = continue_mlm_training(mlm, sources, MlmTrainConfig(epochs=args.epochs, seed=args.seed))
    else:
        examples = [GedExample(vocab.encode(e.source), e.ged_labels) for e in train]
        cfg = GedTrainConfig(epochs=args.epochs, seed=args.seed,
                             learning_rate=args.lr if args.lr is not None else GedTrainConfig.learning_rate)
        model, _ = finetune_ged(mlm, examples, cfg)
    save_mlm(model, args.out)


def cmd_train_gec(args) -> None:
    stage = "train-gec"
    mode = IntegrationMode.parse(args.mode)
    d, vocab = _load_data_dir(args.data, stage)
    mlm = None
    if mode.kind != "none":
        need = f"MLM checkpoint of kind {mode.required_mlm_kind or 'mlm'} (--mlm) for mode {mode.tag}"
        mlm = load_mlm(_require(args.mlm, need, stage))
        if mode.fused and mlm.kind != mode.required_mlm_kind:
            raise CliError(stage, f"missing prerequisite: {need}; got an MLM of kind {mlm.kind}")
    train = load_parallel_corpus(d / "train.tsv", drop_identical=True)
    dev = load_parallel_corpus(d / "dev.tsv", drop_identical=True)
    pairs = lambda c: [(vocab.encode(e.source), vocab.encode(e.target)) for e in c]
    model = build_gec_model(_model_config(args, len(vocab)), mode, mlm, seed=args.seed,
                            drop_net_rate=args.drop_net, reverse_target=args.reverse_target)
    model, _ = train_gec(model, pairs(train), pairs(dev), GecTrainConfig(epochs=args.epochs, seed=args.seed))
    save_gec(model, args.out)


def _load_gec(path, mlm_path, stage: str):
    ckpt = _require(path, "GEC checkpoint", stage)
    mlm = load_mlm(mlm_path) if mlm_path else None
    return load_gec(ckpt, mlm)


def cmd_decode(args) -> None:
    vocab = load_vocab(_require(args.vocab, "vocabulary file (--vocab)", "decode"))
    model = _load_gec(args.model, args.mlm, "decode")
    sents = _read_tokens(_require(args.input, "input file (--input)", "decode"))
    outs, nbests = correct_sentences(model, vocab, sents, beam_size=args.beam, return_nbest=True)
    _write_tokens(args.out, outs)
    if args.nbest:
        write_nbest_jsonl(args.nbest, nbests, vocab)


def cmd_rerank(args) -> None:
    vocab = load_vocab(_require(args.vocab, "vocabulary file (--vocab)", "rerank"))
    l2r = [_load_gec(p, args.mlm, "rerank") for p in args.l2r]
    r2l = [_load_gec(p, args.mlm, "rerank") for p in args.r2l]
    if any(m.reverse_target for m in l2r) or not all(m.reverse_target for m in r2l):
        raise CliError("rerank", "--l2r models must be left-to-right and --r2l models right-to-left")
    sents = _read_tokens(_require(args.input, "input file (--input)", "rerank"))
    _, nbests = correct_sentences(l2r, vocab, sents, beam_size=args.beam, return_nbest=True)
    outs = []
    for words, nb in zip(sents, nbests):
        nb = rerank(nb, l2r, r2l, n_models=len(l2r))
        outs.append(restore_unknowns(words, vocab.decode(nb.best.words), vocab))
    _write_tokens(args.out, outs)
    if args.nbest:
        write_nbest_jsonl(args.nbest, nbests, vocab)


def cmd_evaluate(args) -> None:
    system = _read_tokens(_require(args.sys, "system output (--sys)", "evaluate"))
    sources = _read_tokens(_require(args.src, "source file (--src)", "evaluate"))
    gold = load_gold_edits(_require(args.gold, "gold edits (--gold)", "evaluate"))
    if not len(system) == len(sources) == len(gold):
        raise CliError("evaluate", f"line counts differ: sys {len(system)}, src {len(sources)}, gold {len(gold)}")
    refs = [apply_edits(s, g) for s, g in zip(sources, gold)]
    evaluate(system, sources, refs, gold).save(args.out)


def cmd_probe(args) -> None:
    d, vocab = _load_data_dir(args.data, "probe")
    mlm = load_mlm(_require(args.mlm, "MLM checkpoint (--mlm)", "probe"))
    corpus = load_parallel_corpus(d / f"{args.split}.tsv", drop_identical=False)
    ds = collect_probe_data(mlm, corpus.examples, vocab, args.top_k, args.min_errors, seed=args.seed)
    coords, var = project_2d(ds.vectors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = args.tag or mlm.kind
    write_projection_csv(out / f"projection_{tag}.csv", coords, ds, tag)
    write_probe_summary(out / f"probe_{tag}.json", tag, probe_separation(ds, seed=args.seed), var)


def cmd_experiment(args) -> None:
    cfg = ExperimentConfig.load(_require(args.config, "experiment config (--config)", "experiment"))
    cfg.seeds = cfg.seeds if args.seed is None else [args.seed]
    res = run_experiment(cfg, args.out)
    if res.errors:
        raise CliError("experiment", f"{len(res.errors)} cell(s) failed: {json.dumps(res.errors, sort_keys=True)}")


# ------------------------------------------------------------------ parser


def _add_model_args(p) -> None:
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--max-len", type=int, default=48)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gecfuse", description="Masked-LM fusion for error correction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, seed_default=0):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic corpus, clean text and vocabulary")
    p.add_argument("--n-train", type=int, default=10_000)
    p.add_argument("--n-dev", type=int, default=1_000)
    p.add_argument("--n-test", type=int, default=1_000)
    p.add_argument("--n-clean", type=int, default=40_000)
    p.add_argument("--vocab-size", type=int, default=300)

    p = add("pretrain-mlm", cmd_pretrain_mlm, "masked-LM pre-training on clean text")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=6)
    _add_model_args(p)

    p = add("adapt-mlm", cmd_adapt_mlm, "adapt an MLM to GEC data")
    p.add_argument("--data", required=True)
    p.add_argument("--mlm", required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--mask", action="store_true", help="continue masked-LM training on GEC sources")
    which.add_argument("--ged", action="store_true", help="fine-tune for error detection")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=None)

    p = add("train-gec", cmd_train_gec, "train an encoder-decoder correction model")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=["none", "init", "fuse-vanilla", "fuse-mask", "fuse-ged"])
    p.add_argument("--mlm", default=None)
    p.add_argument("--reverse-target", action="store_true")
    p.add_argument("--drop-net", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=40)
    _add_model_args(p)

    p = add("decode", cmd_decode, "beam-search decode a file of tokenised sentences")
    p.add_argument("--model", required=True)
    p.add_argument("--mlm", default=None)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--nbest", default=None, help="optional n-best JSONL dump")

    p = add("rerank", cmd_rerank, "decode with an L2R ensemble and re-rank with R2L models")
    p.add_argument("--l2r", nargs="+", required=True)
    p.add_argument("--r2l", nargs="+", required=True)
    p.add_argument("--mlm", default=None)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--nbest", default=None)

    p = add("evaluate", cmd_evaluate, "score system output against gold edits")
    p.add_argument("--sys", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--gold", required=True)

    p = add("probe", cmd_probe, "linear probe and 2-D projection of MLM vectors")
    p.add_argument("--data", required=True)
    p.add_argument("--mlm", required=True)
    p.add_argument("--split", default="dev", choices=["train", "dev", "test"])
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--min-errors", type=int, default=50)
    p.add_argument("--tag", default=None)

    p = add("experiment", cmd_experiment, "run a multi-seed experiment from a JSON config", seed_default=None)
    p.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
