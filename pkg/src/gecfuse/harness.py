"""Multi-seed experiment pipeline: data, MLM stages, GEC training, decoding, scoring, results.csv.

Output layout under ``out_dir``::

    config.json
    data/{train,dev,test}.tsv, *.edits.jsonl, clean.txt, vocab.json
    seed{S}/mlm.ckpt, mlm_mask.ckpt, mlm_ged.ckpt, stages.json
    cells/{mode}/seed{S}/gec.ckpt, last.ckpt, test.out, dev.out, report.json, manifest.json, done.json
    results.csv

A cell with ``done.json`` is never recomputed; a cell that failed leaves
``error.json`` instead and is retried by the next run.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import subprocess
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.corpus import (
    GecExample,
    gen_clean_sentences,
    gen_synthetic_corpus,
    remove_uncorrected,
    write_gold_edits,
    write_parallel_corpus,
)
from .data.grammar import DEFAULT_PROFILE
from .decoding import correct_sentences
from .evaluation import evaluate
from .gec_model import (
    MODE_TAGS,
    GecTrainConfig,
    IntegrationMode,
    build_gec_model,
    save_gec,
    train_gec,
)
from .mlm import (
    GedExample,
    GedTrainConfig,
    MlmModel,
    MlmTrainConfig,
    continue_mlm_training,
    finetune_ged,
    ged_metrics,
    init_mlm,
    load_mlm,
    pretrain_mlm,
    save_mlm,
)
from .transformer import TransformerConfig
from .vocab import Vocab, build_vocab

log = logging.getLogger(__name__)

RESULT_FIELDS = ("mode", "seed", "P", "R", "F05", "GLEU", "EM", "config_hash")


@dataclass
class ExperimentConfig:
    modes: list[str] = field(default_factory=lambda: list(MODE_TAGS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    data_seed: int = 0
    grammar_seed: int = 0
    n_train: int = 10_000
    n_dev: int = 1_000
    n_test: int = 1_000
    n_clean: int = 40_000
    error_profile: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PROFILE))
    vocab_size: int = 300
    model: dict = field(default_factory=lambda: dict(d_model=64, n_heads=4, d_ff=128, n_layers=2, max_len=48,
                                                      dropout_rate=0.1))
    mlm_train: dict = field(default_factory=lambda: dict(epochs=6))
    mask_adapt: dict = field(default_factory=lambda: dict(epochs=2))
    ged_train: dict = field(default_factory=lambda: dict(epochs=5, learning_rate=5e-4))
    gec_train: dict = field(default_factory=lambda: dict(epochs=40))
    drop_net_rate: float = 1.0
    beam_size: int = 5
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        for m in self.modes:
            IntegrationMode.parse(m)
        if len(set(self.modes)) != len(self.modes):
            raise ValueError("modes must be distinct")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def transformer_config(self, vocab_size: int) -> TransformerConfig:
        return TransformerConfig(vocab_size=vocab_size, **self.model)


@dataclass
class ExperimentData:
    train: list[GecExample]
    dev: list[GecExample]
    test: list[GecExample]
    clean: list[list[str]]
    vocab: Vocab


@dataclass
class ExperimentResult:
    rows: list[dict]
    means: list[dict]
    errors: dict[str, str]
    results_path: Path

    def mean_f05(self, mode: str) -> float:
        return next(float(r["F05"]) for r in self.means if r["mode"] == mode)


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    """Deterministic corpora for one experiment; independent of the training seeds."""
    base = cfg.data_seed * 1000
    kw = dict(error_profile=cfg.error_profile, grammar_seed=cfg.grammar_seed)
    train = gen_synthetic_corpus(cfg.n_train, rng_seed=base + 1, **kw)
    dev = gen_synthetic_corpus(cfg.n_dev, rng_seed=base + 2, **kw)
    test = gen_synthetic_corpus(cfg.n_test, rng_seed=base + 3, **kw)
    clean = gen_clean_sentences(cfg.n_clean, rng_seed=base + 4, grammar_seed=cfg.grammar_seed)
    vocab = build_vocab([e.target for e in train] + clean, cfg.vocab_size)
    return ExperimentData(train, dev, test, clean, vocab)


def build_probe_corpus(cfg: ExperimentConfig, n: int = 10_000) -> list[GecExample]:
    """Held-out corpus for representation probes; no training stage ever sees it."""
    kw = dict(error_profile=cfg.error_profile, grammar_seed=cfg.grammar_seed)
    return gen_synthetic_corpus(n, rng_seed=cfg.data_seed * 1000 + 5, **kw)


def write_data(data: ExperimentData, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        exs = getattr(data, name)
        write_parallel_corpus(out / f"{name}.tsv", exs)
        write_gold_edits(out / f"{name}.edits.jsonl", exs)
    (out / "clean.txt").write_text("".join(" ".join(s) + "\n" for s in data.clean), encoding="utf-8")
    (out / "vocab.json").write_text(json.dumps(data.vocab.to_list()) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocab:
    return Vocab(json.loads(Path(path).read_text(encoding="utf-8")))


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _pairs(vocab: Vocab, examples) -> list[tuple[list[int], list[int]]]:
    return [(vocab.encode(e.source), vocab.encode(e.target)) for e in examples]


class _MlmStages:
    """Per-seed MLM checkpoints, built on first use and reloaded afterwards."""

    def __init__(self, cfg: ExperimentConfig, data: ExperimentData, seed: int, root: Path):
        self.cfg, self.data, self.seed, self.root = cfg, data, seed, root
        self.cache: dict[str, MlmModel] = {}
        root.mkdir(parents=True, exist_ok=True)

    def _stage(self, name: str, build) -> MlmModel:
        if name in self.cache:
            return self.cache[name]
        path = self.root / f"{name}.ckpt"
        if path.exists():
            model = load_mlm(path)
        else:
            t0 = time.perf_counter()
            model, info = build()
            save_mlm(model, path)
            self._record(name, {**info, "seconds": time.perf_counter() - t0})
        self.cache[name] = model
        return model

    def _record(self, name: str, info: dict) -> None:
        path = self.root / "stages.json"
        stages = json.loads(path.read_text()) if path.exists() else {}
        stages[name] = info
        path.write_text(json.dumps(stages, indent=2, sort_keys=True) + "\n")

    def vanilla(self) -> MlmModel:
        def build():
            vocab = self.data.vocab
            cfg = self.cfg.transformer_config(len(vocab)).with_(positional="learned")
            tcfg = MlmTrainConfig(**{**self.cfg.mlm_train, "seed": self.seed})
            model, hist = pretrain_mlm([vocab.encode(s) for s in self.data.clean], init_mlm(cfg, self.seed), tcfg)
            return model, {"history": hist.epochs}

        return self._stage("mlm", build)

    def mask_adapted(self) -> MlmModel:
        def build():
            tcfg = MlmTrainConfig(**{**self.cfg.mask_adapt, "seed": self.seed})
            sources = [self.data.vocab.encode(e.source) for e in self.data.train]
            model, hist = continue_mlm_training(self.vanilla(), sources, tcfg)
            return model, {"history": hist.epochs}

        return self._stage("mlm_mask", build)

    def ged(self) -> MlmModel:
        def build():
            vocab = self.data.vocab
            tcfg = GedTrainConfig(**{**self.cfg.ged_train, "seed": self.seed})
            train = [GedExample(vocab.encode(e.source), e.ged_labels) for e in self.data.train]
            model, hist = finetune_ged(self.vanilla(), train, tcfg)
            dev = [GedExample(vocab.encode(e.source), e.ged_labels) for e in self.data.dev]
            return model, {"history": hist.epochs, "dev": ged_metrics(model, dev)}

        return self._stage("mlm_ged", build)

    def for_mode(self, mode: IntegrationMode) -> MlmModel | None:
        if mode.kind == "none":
            return None
        return {"mlm": self.vanilla, "mlm_mask_adapted": self.mask_adapted, "mlm_ged": self.ged}[
            mode.required_mlm_kind or "mlm"
        ]()


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _fmt_mean(x: float) -> str:
    # per-seed cells carry 6 decimals; 10 keeps the mean within 1e-9 of its recomputation
    return f"{x:.10f}"


def run_cell(cfg: ExperimentConfig, data: ExperimentData, mode_tag: str, seed: int, stages: _MlmStages,
             cell_dir: Path, chash: str) -> dict:
    """Train, decode and score one (mode, seed) cell; returns its results row."""
    t0 = time.perf_counter()
    cell_dir.mkdir(parents=True, exist_ok=True)
    mode = IntegrationMode.parse(mode_tag)
    vocab = data.vocab
    mlm = stages.for_mode(mode)
    gec_cfg = cfg.transformer_config(len(vocab))
    model = build_gec_model(gec_cfg, mode, mlm, seed=seed, drop_net_rate=cfg.drop_net_rate)
    train_pairs = _pairs(vocab, remove_uncorrected(data.train)[0])
    dev_pairs = _pairs(vocab, remove_uncorrected(data.dev)[0])
    tcfg = GecTrainConfig(**{**cfg.gec_train, "seed": seed})
    model, hist = train_gec(model, train_pairs, dev_pairs, tcfg, out_dir=cell_dir)
    ckpt_hash = save_gec(model, cell_dir / "gec.ckpt")
    reports = {}
    for split in ("dev", "test"):
        exs = getattr(data, split)
        outs = correct_sentences(model, vocab, [e.source for e in exs], beam_size=cfg.beam_size)
        (cell_dir / f"{split}.out").write_text("".join(" ".join(o) + "\n" for o in outs), encoding="utf-8")
        reports[split] = evaluate(outs, [e.source for e in exs], [e.target for e in exs], [e.edits for e in exs])
    reports["dev"].save(cell_dir / "dev_report.json")
    reports["test"].save(cell_dir / "report.json")
    rep = reports["test"]
    row = {
        "mode": mode_tag,
        "seed": str(seed),
        "P": _fmt(rep.precision),
        "R": _fmt(rep.recall),
        "F05": _fmt(rep.f_half),
        "GLEU": _fmt(rep.gleu),
        "EM": _fmt(rep.exact_match_rate),
        "config_hash": chash,
    }
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": chash,
        "mode": mode_tag,
        "seed": seed,
        "seeds": cfg.seeds,
        "checkpoints": {
            "gec": str(cell_dir / "gec.ckpt"),
            "gec_sha256": ckpt_hash,
            "mlm": str(stages.root / {"mlm": "mlm.ckpt", "mlm_mask_adapted": "mlm_mask.ckpt",
                                      "mlm_ged": "mlm_ged.ckpt"}[mlm.kind]) if mlm is not None else None,
        },
        "epochs_run": len(hist.epochs),
        "history": hist.epochs,
        "wall_seconds": time.perf_counter() - t0,
        "git_describe": _git_describe(),
    }
    (cell_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (cell_dir / "done.json").write_text(json.dumps(row, sort_keys=True) + "\n")
    return row


def mean_rows(rows: list[dict], modes: list[str], chash: str) -> list[dict]:
    out = []
    for mode in modes:
        mine = [r for r in rows if r["mode"] == mode]
        if not mine:
            continue
        row = {"mode": mode, "seed": "mean", "config_hash": chash}
        for k in ("P", "R", "F05", "GLEU", "EM"):
            row[k] = _fmt_mean(float(np.mean([float(r[k]) for r in mine])))
        out.append(row)
    return out


def results_csv(rows: list[dict], means: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows + means:
        w.writerow({k: r[k] for k in RESULT_FIELDS})
    return buf.getvalue()


def read_results_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run (or resume) every mode x seed cell and write ``results.csv``."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    chash = cfg.config_hash()
    data = build_data(cfg)
    if not (out / "data" / "vocab.json").exists():
        write_data(data, out / "data")
    rows, errors = [], {}
    for seed in cfg.seeds:
        stages = _MlmStages(cfg, data, seed, out / f"seed{seed}")
        for mode in cfg.modes:
            cell_dir = out / "cells" / mode / f"seed{seed}"
            done = cell_dir / "done.json"
            if done.exists():
                rows.append(json.loads(done.read_text()))
                continue
            try:
                rows.append(run_cell(cfg, data, mode, seed, stages, cell_dir, chash))
                (cell_dir / "error.json").unlink(missing_ok=True)
            except Exception as exc:  # a failed cell must not stop the others
                log.exception("cell %s seed %d failed", mode, seed)
                errors[f"{mode}/seed{seed}"] = f"{type(exc).__name__}: {exc}"
                cell_dir.mkdir(parents=True, exist_ok=True)
                (cell_dir / "error.json").write_text(json.dumps(
                    {"error": errors[f"{mode}/seed{seed}"], "traceback": traceback.format_exc()}, indent=2))
    order = {(m, str(s)): i for i, (m, s) in enumerate((m, s) for m in cfg.modes for s in cfg.seeds)}
    rows.sort(key=lambda r: order[(r["mode"], r["seed"])])
    means = mean_rows(rows, cfg.modes, chash)
    path = out / "results.csv"
    path.write_text(results_csv(rows, means), encoding="utf-8")
    if errors:
        (out / "errors.json").write_text(json.dumps(errors, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(rows, means, errors, path)
