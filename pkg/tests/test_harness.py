import json

import numpy as np
import pytest

from gecfuse import harness
from gecfuse.cli import main
from gecfuse.data import gen_synthetic_corpus, write_gold_edits
from gecfuse.harness import ExperimentConfig, read_results_csv, run_experiment

TINY_MODEL = dict(d_model=16, n_heads=2, d_ff=32, n_layers=1, max_len=40, dropout_rate=0.1)


def _tiny(**kw):
    base = dict(modes=["none"], seeds=[0], n_train=60, n_dev=20, n_test=20, n_clean=120, model=TINY_MODEL,
                mlm_train=dict(epochs=1), mask_adapt=dict(epochs=1), ged_train=dict(epochs=1),
                gec_train=dict(epochs=2), beam_size=2)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_seed_invariants(self):
        with pytest.raises(ValueError):
            ExperimentConfig(seeds=[])
        with pytest.raises(ValueError):
            ExperimentConfig(seeds=[1, 1])

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ExperimentConfig(modes=["fuse-magic"])

    def test_round_trip_and_hash(self, tmp_path):
        cfg = _tiny()
        cfg.save(tmp_path / "c.json")
        back = ExperimentConfig.load(tmp_path / "c.json")
        assert back == cfg and back.config_hash() == cfg.config_hash()
        assert _tiny(out_dir="elsewhere").config_hash() == cfg.config_hash()
        assert _tiny(seeds=[1]).config_hash() != cfg.config_hash()

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ExperimentConfig.from_dict({"seedz": [0]})


class TestRunExperiment:
    def test_single_cell(self, tmp_path):
        res = run_experiment(_tiny(), tmp_path)
        assert not res.errors
        assert len(res.rows) == 1 and len(res.means) == 1
        cell = tmp_path / "cells" / "none" / "seed0"
        for name in ("gec.ckpt", "test.out", "dev.out", "report.json", "manifest.json", "done.json"):
            assert (cell / name).exists(), name
        rows = read_results_csv(res.results_path)
        assert list(rows[0]) == ["mode", "seed", "P", "R", "F05", "GLEU", "EM", "config_hash"]
        assert rows[0]["config_hash"] == _tiny().config_hash()
        manifest = json.loads((cell / "manifest.json").read_text())
        assert manifest["checkpoints"]["gec"].endswith("gec.ckpt") and manifest["wall_seconds"] > 0
        assert "git_describe" in manifest and manifest["seeds"] == [0]

    def test_resume_is_idempotent(self, tmp_path):
        cfg = _tiny(modes=["none", "fuse-ged"])
        first = run_experiment(cfg, tmp_path)
        ckpt = tmp_path / "cells" / "fuse-ged" / "seed0" / "gec.ckpt"
        stamp = ckpt.stat().st_mtime_ns
        before = first.results_path.read_bytes()

        def boom(*a, **k):
            raise AssertionError("a completed cell was retrained")

        mp = pytest.MonkeyPatch()
        mp.setattr(harness, "train_gec", boom)
        try:
            second = run_experiment(cfg, tmp_path)
        finally:
            mp.undo()
        assert second.results_path.read_bytes() == before
        assert ckpt.stat().st_mtime_ns == stamp

    def test_mean_is_mean_of_seeds(self, tmp_path):
        res = run_experiment(_tiny(seeds=[0, 1, 2, 3], gec_train=dict(epochs=1)), tmp_path)
        rows = read_results_csv(res.results_path)
        per_seed = [r for r in rows if r["seed"] != "mean"]
        mean = next(r for r in rows if r["seed"] == "mean")
        assert len(per_seed) == 4
        for k in ("P", "R", "F05", "GLEU", "EM"):
            assert abs(float(mean[k]) - np.mean([float(r[k]) for r in per_seed])) < 1e-9

    def test_failed_cell_is_isolated(self, tmp_path, monkeypatch):
        real = harness.train_gec

        def flaky(model, *a, **k):
            if model.mode.tag == "init":
                raise RuntimeError("induced failure")
            return real(model, *a, **k)

        monkeypatch.setattr(harness, "train_gec", flaky)
        res = run_experiment(_tiny(modes=["none", "init"]), tmp_path)
        assert list(res.errors) == ["init/seed0"]
        assert [r["mode"] for r in res.rows] == ["none"]
        assert (tmp_path / "cells" / "init" / "seed0" / "error.json").exists()
        assert json.loads((tmp_path / "errors.json").read_text())["init/seed0"].startswith("RuntimeError")


class TestCli:
    def test_missing_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["evaluate", "--out", "x.json", "--src", "s.txt"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--out", "d", "--bogus"])
        assert exc.value.code == 2

    def test_evaluate_happy_path(self, tmp_path):
        exs = gen_synthetic_corpus(30, rng_seed=1)
        (tmp_path / "src.txt").write_text("".join(" ".join(e.source) + "\n" for e in exs))
        (tmp_path / "out.txt").write_text("".join(" ".join(e.target) + "\n" for e in exs))
        write_gold_edits(tmp_path / "gold.jsonl", exs)
        code = main(["evaluate", "--sys", str(tmp_path / "out.txt"), "--src", str(tmp_path / "src.txt"),
                     "--gold", str(tmp_path / "gold.jsonl"), "--out", str(tmp_path / "r.json")])
        assert code == 0
        rep = json.loads((tmp_path / "r.json").read_text())
        assert rep["exact_match_rate"] == 1.0 and rep["f_half"] == 1.0

    def test_fuse_ged_needs_mlm(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--n-train", "20", "--n-dev", "5", "--n-test", "5",
                     "--n-clean", "20"]) == 0
        code = main(["train-gec", "--data", str(tmp_path / "d"), "--mode", "fuse-ged", "--out",
                     str(tmp_path / "g.ckpt")])
        err = capsys.readouterr().err
        assert code != 0 and "missing prerequisite" in err and "mlm_ged" in err

    def test_missing_data_dir(self, tmp_path, capsys):
        assert main(["pretrain-mlm", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m.ckpt")]) == 1
        assert "missing prerequisite" in capsys.readouterr().err


class TestCliPipeline:
    def test_end_to_end(self, tmp_path):
        d = str(tmp_path / "data")
        model = ["--d-model", "16", "--n-heads", "2", "--d-ff", "32", "--layers", "1", "--max-len", "40"]
        assert main(["gen-data", "--out", d, "--n-train", "80", "--n-dev", "20", "--n-test", "20",
                     "--n-clean", "100"]) == 0
        mlm = str(tmp_path / "mlm.ckpt")
        ged = str(tmp_path / "ged.ckpt")
        assert main(["pretrain-mlm", "--data", d, "--out", mlm, "--epochs", "1", *model]) == 0
        assert main(["adapt-mlm", "--data", d, "--mlm", mlm, "--ged", "--epochs", "1", "--out", ged]) == 0
        assert main(["adapt-mlm", "--data", d, "--mlm", mlm, "--mask", "--epochs", "1",
                     "--out", str(tmp_path / "mask.ckpt")]) == 0
        l2r, r2l = str(tmp_path / "l2r.ckpt"), str(tmp_path / "r2l.ckpt")
        assert main(["train-gec", "--data", d, "--mode", "fuse-ged", "--mlm", ged, "--epochs", "1", "--out", l2r,
                     *model]) == 0
        assert main(["train-gec", "--data", d, "--mode", "fuse-ged", "--mlm", ged, "--epochs", "1",
                     "--reverse-target", "--seed", "1", "--out", r2l, *model]) == 0
        src = tmp_path / "data" / "test.tsv"
        (tmp_path / "in.txt").write_text("".join(line.split("\t")[0] + "\n" for line in src.read_text().splitlines()))
        vocab = str(tmp_path / "data" / "vocab.json")
        out = str(tmp_path / "dec.txt")
        assert main(["decode", "--model", l2r, "--mlm", ged, "--vocab", vocab, "--input", str(tmp_path / "in.txt"),
                     "--beam", "2", "--out", out, "--nbest", str(tmp_path / "nb.jsonl")]) == 0
        assert len((tmp_path / "dec.txt").read_text().splitlines()) == 20
        rr = str(tmp_path / "rr.txt")
        assert main(["rerank", "--l2r", l2r, "--r2l", r2l, "--mlm", ged, "--vocab", vocab,
                     "--input", str(tmp_path / "in.txt"), "--beam", "2", "--out", rr]) == 0
        assert main(["rerank", "--l2r", r2l, "--r2l", l2r, "--mlm", ged, "--vocab", vocab,
                     "--input", str(tmp_path / "in.txt"), "--out", rr]) == 1
        assert main(["evaluate", "--sys", rr, "--src", str(tmp_path / "in.txt"),
                     "--gold", str(tmp_path / "data" / "test.edits.jsonl"), "--out", str(tmp_path / "r.json")]) == 0
        assert main(["probe", "--data", d, "--mlm", ged, "--split", "train", "--top-k", "2", "--min-errors", "2",
                     "--out", str(tmp_path / "probe")]) == 0
        summary = json.loads((tmp_path / "probe" / "probe_mlm_ged.json").read_text())
        assert 0.0 <= summary["probe_accuracy"] <= 1.0

    def test_experiment_subcommand(self, tmp_path):
        _tiny().save(tmp_path / "cfg.json")
        assert main(["experiment", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "run")]) == 0
        assert (tmp_path / "run" / "results.csv").exists()
