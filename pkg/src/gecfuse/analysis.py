"""Do an MLM's last-layer vectors separate erroneous from correct uses of a word?

Vectors of a word at its erroneous source positions are paired with an
equal number of vectors of the same word used correctly in reference
sentences.  The pairs are projected to 2-D with PCA for plotting and fed to a
logistic-regression probe whose held-out accuracy measures separation.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .mlm import MlmModel, mlm_representation
from .tensor import ContractError, _sigmoid_np, no_grad
from .training import pad_batch
from .vocab import UNK, Vocab

PROBE_L2 = 1e-3
PROBE_TOL = 1e-6


@dataclass
class ProbeDataset:
    vectors: np.ndarray  # (m, d_model)
    labels: np.ndarray  # 1 = the word occurs as an error
    words: list[str]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ProbeResult:
    accuracy: float
    baseline: float
    n_train: int
    n_test: int
    iterations: int


def _last_layer(mlm: MlmModel, sentences: list[list[int]], batch_size: int) -> list[np.ndarray]:
    out = []
    with no_grad():
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start : start + batch_size]
            h = mlm_representation(pad_batch(chunk), mlm).data.astype(np.float64)
            out.extend(h[i, : len(s)] for i, s in enumerate(chunk))
    return out


def collect_probe_data(mlm: MlmModel, examples, vocab: Vocab, top_k: int = 8, min_error_count: int = 50,
                       seed: int = 0, batch_size: int = 128) -> ProbeDataset:
    """Balanced error/correct vectors for the ``top_k`` most often erroneous in-vocabulary words.

    Error occurrences are source tokens labelled 1; correct occurrences are
    drawn (seeded, without replacement) from the reference sentences.  When a
    word has fewer correct than erroneous uses, its errors are subsampled.
    """
    if min_error_count < 1:
        raise ValueError("min_error_count must be at least 1")
    limit = mlm.config.max_len
    err_sites, ok_sites = defaultdict(list), defaultdict(list)
    for i, ex in enumerate(examples):
        if ex.ged_labels is None:
            raise ValueError("examples need GED labels")
        for j, (w, lab) in enumerate(zip(ex.source[:limit], ex.ged_labels)):
            if lab == 1 and vocab.id(w) != UNK:
                err_sites[w].append((i, j))
        for j, w in enumerate(ex.target[:limit]):
            ok_sites[w].append((i, j))
    counts = Counter({w: len(s) for w, s in err_sites.items()})
    qualifying = [w for w, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])) if c >= min_error_count]
    if len(qualifying) < top_k:
        raise ValueError(
            f"only {len(qualifying)} words are erroneous at least {min_error_count} times; "
            f"top_k={top_k} is not achievable (use top_k <= {len(qualifying)})"
        )
    chosen = qualifying[:top_k]
    rng = np.random.default_rng(seed)
    picks = []  # (side, example index, position, word, label)
    for w in chosen:
        n = min(len(err_sites[w]), len(ok_sites[w]))
        if n == 0:
            raise ValueError(f"word {w!r} never occurs correctly in the references")
        errs = [err_sites[w][k] for k in np.sort(rng.choice(len(err_sites[w]), n, replace=False))]
        oks = [ok_sites[w][k] for k in np.sort(rng.choice(len(ok_sites[w]), n, replace=False))]
        picks += [("src", i, j, w, 1) for i, j in errs] + [("tgt", i, j, w, 0) for i, j in oks]
    need_src = sorted({i for side, i, *_ in picks if side == "src"})
    need_tgt = sorted({i for side, i, *_ in picks if side == "tgt"})
    src_vec = dict(zip(need_src, _last_layer(mlm, [vocab.encode(examples[i].source[:limit]) for i in need_src],
                                             batch_size)))
    tgt_vec = dict(zip(need_tgt, _last_layer(mlm, [vocab.encode(examples[i].target[:limit]) for i in need_tgt],
                                             batch_size)))
    vectors = np.stack([(src_vec if side == "src" else tgt_vec)[i][j] for side, i, j, _, _ in picks])
    labels = np.array([lab for *_, lab in picks], dtype=np.int64)
    return ProbeDataset(vectors, labels, [p[3] for p in picks])


def project_2d(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """PCA onto the top two components; returns ``(coords (m, 2), explained_variance_fractions (2,))``.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("project_2d needs at least two row vectors")
    centred = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    total = float(np.sum(s**2))
    if total <= 0.0:
        raise ValueError("input has zero variance")
    comps = vt[:2].copy()
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps)])
    for c in comps:
        if np.any(c):
            c *= np.sign(c[np.argmax(np.abs(c))])
    var = np.zeros(2)
    var[: min(2, len(s))] = s[:2] ** 2 / total
    return centred @ comps.T, var


def _fit_logistic(x: np.ndarray, y: np.ndarray, l2: float, tol: float, max_iter: int) -> tuple[np.ndarray, int]:
    """Full-batch gradient descent on mean log-loss + l2/2 * |w|^2 (bias unpenalised)."""
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    # step 1/L with L bounding the Hessian of the mean log-loss
    lip = 0.25 * np.linalg.eigvalsh(xb.T @ xb / n)[-1] + l2
    step = 1.0 / lip
    w = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    for it in range(1, max_iter + 1):
        p = _sigmoid_np(xb @ w)
        grad = xb.T @ (p - y) / n + reg * w
        if np.linalg.norm(grad) < tol:
            return w, it
        w -= step * grad
    return w, max_iter


def probe_separation(dataset: ProbeDataset, seed: int = 0, l2: float = PROBE_L2, tol: float = PROBE_TOL,
                     max_iter: int = 200_000) -> ProbeResult:
    """Held-out accuracy of a logistic-regression probe on a seeded 80/20 split.

    Features are standardised with training-split statistics.  The baseline
    predicts the training split's majority class.
    """
    y = np.asarray(dataset.labels, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ContractError("probe needs both labels present")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_train = int(round(0.8 * len(y)))
    if n_train == 0 or n_train == len(y):
        raise ContractError("dataset too small for an 80/20 split")
    tr, te = order[:n_train], order[n_train:]
    x = np.asarray(dataset.vectors, dtype=np.float64)
    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0)
    sd[sd == 0] = 1.0
    xs = (x - mu) / sd
    w, iters = _fit_logistic(xs[tr], y[tr], l2, tol, max_iter)
    pred = (np.hstack([xs[te], np.ones((len(te), 1))]) @ w) > 0
    acc = float(np.mean(pred == (y[te] == 1)))
    majority = 1.0 if y[tr].mean() > 0.5 else 0.0
    baseline = float(np.mean(y[te] == majority))
    return ProbeResult(acc, baseline, len(tr), len(te), iters)


def write_projection_csv(path, coords: np.ndarray, dataset: ProbeDataset, model_tag: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "word", "label", "model_tag"])
        for (a, b), word, lab in zip(coords, dataset.words, dataset.labels):
            w.writerow([f"{a:.6f}", f"{b:.6f}", word, int(lab), model_tag])


def write_probe_summary(path, model_tag: str, result: ProbeResult, explained: Sequence[float] | None = None) -> None:
    d = {"model_tag": model_tag, "probe_accuracy": result.accuracy, "baseline": result.baseline,
         "n_train": result.n_train, "n_test": result.n_test}
    if explained is not None:
        d["explained_variance"] = [float(v) for v in explained]
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")
