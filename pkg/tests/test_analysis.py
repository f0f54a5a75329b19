import csv
import json
from collections import Counter

import numpy as np
import pytest

from gecfuse.analysis import (
    ProbeDataset,
    ProbeResult,
    collect_probe_data,
    probe_separation,
    project_2d,
    write_probe_summary,
    write_projection_csv,
)
from gecfuse.data import build_vocab, gen_synthetic_corpus
from gecfuse.mlm import init_mlm
from gecfuse.tensor import ContractError
from gecfuse.transformer import TransformerConfig


@pytest.fixture(scope="module")
def setup():
    exs = gen_synthetic_corpus(1500, rng_seed=21)
    vocab = build_vocab([e.target for e in exs], 300)
    cfg = TransformerConfig(vocab_size=len(vocab), d_model=16, n_heads=2, d_ff=32, n_layers=1, max_len=48,
                            dropout_rate=0.0)
    return exs, vocab, init_mlm(cfg, 0)


class TestCollect:
    def test_balanced_per_word(self, setup):
        exs, vocab, mlm = setup
        ds = collect_probe_data(mlm, exs, vocab, top_k=4, min_error_count=20)
        assert ds.vectors.shape == (len(ds), 16)
        per = Counter()
        for w, lab in zip(ds.words, ds.labels):
            per[(w, int(lab))] += 1
        words = set(ds.words)
        assert len(words) == 4
        for w in words:
            assert per[(w, 0)] == per[(w, 1)] > 0

    def test_picks_most_frequent_errors(self, setup):
        exs, vocab, mlm = setup
        counts = Counter(w for e in exs for w, lab in zip(e.source, e.ged_labels) if lab and w in vocab)
        ds = collect_probe_data(mlm, exs, vocab, top_k=3, min_error_count=1)
        expected = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:3]]
        assert set(ds.words) == set(expected)

    def test_deterministic(self, setup):
        exs, vocab, mlm = setup
        a = collect_probe_data(mlm, exs, vocab, top_k=3, min_error_count=20, seed=4)
        b = collect_probe_data(mlm, exs, vocab, top_k=3, min_error_count=20, seed=4)
        np.testing.assert_array_equal(a.vectors, b.vectors)
        assert a.words == b.words

    def test_unachievable_top_k_names_limit(self, setup):
        exs, vocab, mlm = setup
        with pytest.raises(ValueError, match=r"top_k <= \d+"):
            collect_probe_data(mlm, exs, vocab, top_k=500, min_error_count=20)

    def test_small_corpus_has_both_labels(self, setup):
        exs, vocab, mlm = setup
        ds = collect_probe_data(mlm, exs[:400], vocab, top_k=1, min_error_count=5)
        assert set(ds.labels.tolist()) == {0, 1}


class TestProject:
    def test_planar_points(self):
        rng = np.random.default_rng(0)
        basis = np.linalg.qr(rng.normal(size=(16, 2)))[0].T
        pts = rng.normal(size=(50, 2)) @ basis + 3.0
        coords, var = project_2d(pts)
        assert abs(var.sum() - 1.0) < 1e-8
        centred = pts - pts.mean(0)
        # coords are an isometric image of the plane: pairwise distances survive
        np.testing.assert_allclose(np.linalg.norm(coords[:, None] - coords[None], axis=-1),
                                   np.linalg.norm(centred[:, None] - centred[None], axis=-1), atol=1e-8)

    def test_isotropic_cloud(self):
        d = 8
        pts = np.random.default_rng(1).normal(size=(100_000, d))
        _, var = project_2d(pts)
        np.testing.assert_allclose(var, 1 / d, atol=0.01)
        assert abs(var.sum() - 2 / d) < 0.015

    def test_duplicates_coincide(self):
        pts = np.vstack([np.tile([1.0, 2.0, 3.0], (5, 1)), [[0.0, 0.0, 1.0]]])
        coords, _ = project_2d(pts)
        assert np.all(coords[:5] == coords[0])

    def test_zero_variance(self):
        with pytest.raises(ValueError):
            project_2d(np.ones((4, 3)))

    def test_reordering_invariance(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(30, 6)) * np.arange(1, 7)
        perm = rng.permutation(30)
        a, va = project_2d(pts)
        b, vb = project_2d(pts[perm])
        np.testing.assert_allclose(b, a[perm], atol=1e-10)
        np.testing.assert_allclose(va, vb, atol=1e-12)


class TestProbe:
    def test_no_signal(self):
        rng = np.random.default_rng(3)
        ds = ProbeDataset(np.ones((10_000, 4)), rng.integers(0, 2, 10_000), ["w"] * 10_000)
        res = probe_separation(ds)
        assert abs(res.accuracy - 0.5) < 0.05

    def test_separable_clusters(self):
        rng = np.random.default_rng(4)
        y = rng.integers(0, 2, 2000)
        x = rng.normal(size=(2000, 2)) * 0.3 + np.where(y[:, None] == 1, 1.0, 0.0) * np.array([1.0, 0.0])
        res = probe_separation(ProbeDataset(x, y, ["w"] * 2000))
        assert res.accuracy > 0.9 and res.accuracy >= res.baseline
        assert (res.n_train, res.n_test) == (1600, 400)

    def test_shuffled_labels_near_baseline(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4000, 3))
        y = (x[:, 0] > 0).astype(int)
        clean = probe_separation(ProbeDataset(x, y, ["w"] * 4000))
        shuffled = probe_separation(ProbeDataset(x, rng.permutation(y), ["w"] * 4000))
        assert clean.accuracy > 0.95
        assert abs(shuffled.accuracy - shuffled.baseline) < 0.06

    def test_single_class(self):
        with pytest.raises(ContractError):
            probe_separation(ProbeDataset(np.zeros((10, 2)), np.ones(10), ["w"] * 10))

    def test_converges(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(500, 4))
        y = (x @ [1.0, -1.0, 0.5, 0.0] + rng.normal(size=500) > 0).astype(int)
        res = probe_separation(ProbeDataset(x, y, ["w"] * 500))
        assert res.iterations < 200_000


class TestOutputs:
    def test_files(self, tmp_path):
        ds = ProbeDataset(np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]]), np.array([0, 1, 1]), ["a", "a", "b"])
        coords, var = project_2d(ds.vectors)
        write_projection_csv(tmp_path / "p.csv", coords, ds, "vanilla")
        rows = list(csv.reader(open(tmp_path / "p.csv")))
        assert rows[0] == ["x", "y", "word", "label", "model_tag"]
        assert [r[2:] for r in rows[1:]] == [["a", "0", "vanilla"], ["a", "1", "vanilla"], ["b", "1", "vanilla"]]
        write_probe_summary(tmp_path / "s.json", "vanilla", ProbeResult(0.8, 0.5, 8, 2, 10), var)
        d = json.loads((tmp_path / "s.json").read_text())
        assert d["probe_accuracy"] == 0.8 and d["baseline"] == 0.5 and len(d["explained_variance"]) == 2
