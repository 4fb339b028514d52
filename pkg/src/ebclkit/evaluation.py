"""Binary metrics with bootstrap spread, linear probing and KNN evaluation of
frozen embeddings."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .errors import ConfigurationError

log = logging.getLogger(__name__)


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d arrays of equal length")
    labels = labels.astype(float)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("binary metrics need both classes present")
    return scores, labels.astype(bool)


def auroc_rank(scores, labels) -> float:
    """Mann-Whitney form: P(random positive outranks random negative), ties 1/2."""
    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores)  # average ranks handle ties
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple:
    """False/true positive rates at every distinct score threshold,
    starting from (0, 0)."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (~y).sum()]
    return fpr, tpr


def auroc_trapezoid(scores, labels) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def auprc_step(scores, labels) -> float:
    """Average precision: sum over thresholds of (R_k - R_{k-1}) * P_k."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last_of_run]
    precision = tps / (last_of_run + 1)
    recall = tps / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def binary_metrics(scores, labels) -> tuple:
    """``(auroc, auprc)``. Raises ValueError when only one class is present."""
    return auroc_rank(scores, labels), auprc_step(scores, labels)


def bootstrap(metric: Callable, scores, labels, n: int = 1000, seed: int = 0, max_redraws: int = 100) -> tuple:
    """Mean and standard deviation of ``metric`` over ``n`` resamples.

    Resamples containing a single class are redrawn (up to ``max_redraws``
    times each).
    """
    if n < 1:
        raise ValueError("bootstrap needs n >= 1")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n):
        for _ in range(max_redraws):
            idx = rng.integers(0, scores.size, scores.size)
            y = labels[idx]
            if 0 < y.sum() < y.size:
                break
        else:
            raise ValueError("could not draw a two-class bootstrap resample")
        values.append(metric(scores[idx], y))
    values = np.asarray(values)
    if n == 1 or np.all(values == values[0]):
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std())


# ---------------------------------------------------------------------------
# embedding tables


@dataclass
class EmbeddingTable:
    """Frozen pre/post embeddings, one row per (patient, event)."""

    patient_ids: np.ndarray
    event_times: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    labels: dict
    split: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.pre)) and np.all(np.isfinite(self.post))):
            raise ValueError("embedding table contains non-finite vectors")

    def __len__(self):
        return len(self.patient_ids)

    def rows(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def features(self, mode: str = "both") -> np.ndarray:
        if mode == "pre":
            return self.pre
        if mode == "post":
            return self.post
        return np.concatenate([self.pre, self.post], axis=1)

    def write(self, directory) -> None:
        """Tensor container (``embeddings.npz``) plus ``index.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(directory / "embeddings.npz", pre=self.pre.astype("<f4"), post=self.post.astype("<f4"),
                 **{f"label__{k}": v for k, v in self.labels.items()})
        with open(directory / "index.csv", "w", encoding="utf-8") as fh:
            fh.write("row,patient_id,event_time,split\n")
            for k, (p, t, s) in enumerate(zip(self.patient_ids, self.event_times, self.split)):
                fh.write(f"{k},{p},{t!r},{s}\n")
        (directory / "provenance.json").write_text(json.dumps(self.provenance, indent=1, sort_keys=True))


def build_embedding_table(embed: Callable, splits: dict, provenance: dict | None = None) -> EmbeddingTable:
    """``embed(TokenBatch) -> ndarray``; ``splits`` maps split name to
    :class:`~ebclkit.featurize.EncodedPairs`."""
    parts = []
    for name, pairs in splits.items():
        parts.append((name, pairs, embed(pairs.pre), embed(pairs.post)))
    tasks = sorted({t for _, p, _, _ in parts for t in p.labels})
    return EmbeddingTable(
        np.concatenate([p.patient_ids for _, p, _, _ in parts]),
        np.concatenate([p.event_times for _, p, _, _ in parts]),
        np.concatenate([a for _, _, a, _ in parts]),
        np.concatenate([b for _, _, _, b in parts]),
        {t: np.concatenate([p.labels.get(t, np.full(len(p), np.nan)) for _, p, _, _ in parts]) for t in tasks},
        np.concatenate([np.full(len(p), name) for name, p, _, _ in parts]),
        dict(provenance or {}),
    )


@dataclass
class EvalReport:
    task: str
    method: str
    metrics: dict                 # name -> {"mean", "std"}
    config: dict
    seeds: list
    std_source: str
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# linear probe


def _logistic_fit(X, y, l2: float, tol: float = 1e-8, max_iter: int = 5000) -> np.ndarray:
    """Minimise mean log-loss + l2/2 * |w|^2 (bias unpenalised); returns
    ``[w..., b]``."""
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])

    def fun(theta):
        z = Xb @ theta
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * theta[:d] @ theta[:d]
        p = 0.5 * (1 + np.tanh(0.5 * z))
        grad = Xb.T @ (p - y) / n
        grad[:d] += l2 * theta[:d]
        return loss, grad

    res = optimize.minimize(fun, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                            options={"gtol": tol, "ftol": 1e-15, "maxiter": max_iter})
    return res.x


def _standardize(train, *others):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    degenerate = sd < 1e-12
    sd = np.where(degenerate, 1.0, sd)
    return [(a - mu) / sd for a in (train, *others)], bool(degenerate.all())


DEFAULT_L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


def linear_probe(table: EmbeddingTable, task: str, l2_grid: Sequence[float] = DEFAULT_L2_GRID, mode: str = "both",
                 n_bootstrap: int = 1000, seed: int = 0) -> EvalReport:
    """Logistic regression on frozen (standardized) embeddings.

    The L2 strength is chosen by validation AUROC; test AUROC/AUPRC are
    reported with bootstrap spread.
    """
    if task not in table.labels:
        raise ConfigurationError(f"no labels for task {task!r}")
    if not l2_grid:
        raise ConfigurationError("l2_grid is empty")
    y_all = table.labels[task]
    X_all = table.features(mode)
    idx = {s: table.rows(s)[~np.isnan(y_all[table.rows(s)])] for s in ("train", "val", "test")}
    if any(v.size == 0 for v in idx.values()):
        raise ConfigurationError("linear probe needs labelled train, val and test rows")
    (Xtr, Xva, Xte), degenerate = _standardize(X_all[idx["train"]], X_all[idx["val"]], X_all[idx["test"]])
    ytr, yva, yte = (y_all[idx[s]] for s in ("train", "val", "test"))
    notes = []
    if degenerate:
        notes.append("embeddings have zero variance on the training split")
    best = None
    for l2 in l2_grid:
        theta = _logistic_fit(Xtr, ytr, l2)
        val_auc = _safe_auroc(Xva @ theta[:-1] + theta[-1], yva)
        if best is None or val_auc > best[0]:
            best = (val_auc, l2, theta)
    val_auc, l2, theta = best
    test_scores = Xte @ theta[:-1] + theta[-1]
    metrics = _test_metrics(test_scores, yte, n_bootstrap, seed)
    return EvalReport(task, "linear_probe", metrics,
                      {"l2": l2, "val_auroc": val_auc, "mode": mode, "l2_grid": list(l2_grid)},
                      [seed], "bootstrap", notes)


def _safe_auroc(scores, labels) -> float:
    try:
        return auroc_rank(scores, labels)
    except ValueError:
        return math.nan


def _test_metrics(scores, labels, n_bootstrap: int, seed: int) -> dict:
    auroc, auprc = binary_metrics(scores, labels)
    a_mean, a_std = bootstrap(auroc_rank, scores, labels, n_bootstrap, seed)
    p_mean, p_std = bootstrap(auprc_step, scores, labels, n_bootstrap, seed)
    return {
        "auroc": {"point": auroc, "mean": a_mean, "std": a_std},
        "auprc": {"point": auprc, "mean": p_mean, "std": p_std},
    }


# ---------------------------------------------------------------------------
# KNN


@dataclass(frozen=True)
class KnnSweep:
    weights: tuple = ("uniform", "distance")
    models: tuple = ("pre_post", "ensemble")
    metrics: tuple = ("cosine", "euclidean", "euclidean_l2")
    ks: tuple = (10, 30, 100, 300, 1000)

    def configs(self, mode: str = "both"):
        models = self.models if mode == "both" else (mode,)
        return list(itertools.product(self.weights, models, self.metrics, self.ks))


def _unit(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def _view(table_pre, table_post, view: str, metric: str):
    """Vectors for one KNN view; ``euclidean_l2`` normalizes pre and post
    separately before concatenating."""
    if metric == "euclidean_l2":
        table_pre, table_post = _unit(table_pre), _unit(table_post)
    if view == "pre":
        return table_pre
    if view == "post":
        return table_post
    return np.concatenate([table_pre, table_post], axis=1)


def _distances(query, train, metric: str):
    if metric == "cosine":
        return 1.0 - _unit(query) @ _unit(train).T
    return cdist(query, train, "euclidean")


def knn_proba(dist: np.ndarray, train_labels: np.ndarray, k: int, weighting: str) -> np.ndarray:
    """P(label = 1) from the ``k`` nearest training rows of each query.

    With distance weighting, weights are 1/d; a query with any neighbour at
    distance 0 gives those neighbours all the weight.
    """
    if weighting not in ("uniform", "distance"):
        raise ConfigurationError(f"unknown weighting {weighting!r}")
    k = min(k, dist.shape[1])
    nn_idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    nn_d = np.take_along_axis(dist, nn_idx, axis=1)
    nn_y = train_labels[nn_idx]
    if weighting == "uniform":
        return nn_y.mean(axis=1)
    zero = nn_d <= 1e-12
    w = np.where(zero.any(axis=1, keepdims=True), zero.astype(float), 1.0 / np.maximum(nn_d, 1e-300))
    return (w * nn_y).sum(axis=1) / w.sum(axis=1)


def knn_predict(table: EmbeddingTable, train_idx, query_idx, y_train, weighting, model, metric, k) -> np.ndarray:
    views = ("pre", "post", "both") if model == "ensemble" else ({"pre_post": "both"}.get(model, model),)
    probs = []
    for view in views:
        tr = _view(table.pre[train_idx], table.post[train_idx], view, metric)
        q = _view(table.pre[query_idx], table.post[query_idx], view, metric)
        probs.append(knn_proba(_distances(q, tr, metric), y_train, k, weighting))
    return np.mean(probs, axis=0)


def knn_eval(table: EmbeddingTable, task: str, sweep: KnnSweep = KnnSweep(), mode: str = "both",
             n_bootstrap: int = 1000, seed: int = 0) -> EvalReport:
    """Full Cartesian KNN sweep; best configuration by validation AUROC,
    test metrics with bootstrap spread. ``mode="pre"`` restricts to a
    pre-only KNN (for pre-only tasks)."""
    configs = sweep.configs(mode)
    if not configs:
        raise ConfigurationError("empty KNN sweep")
    y_all = table.labels[task]
    idx = {s: table.rows(s)[~np.isnan(y_all[table.rows(s)])] for s in ("train", "val", "test")}
    y_train = y_all[idx["train"]]
    notes = []
    skipped = sorted({k for *_, k in configs if k > idx["train"].size})
    if skipped:
        notes.append(f"skipped k={skipped}: only {idx['train'].size} training rows")
    configs = [c for c in configs if c[3] <= idx["train"].size]
    if not configs:
        raise ConfigurationError("every k in the sweep exceeds the number of training rows")
    best = None
    for weighting, model, metric, k in configs:
        p = knn_predict(table, idx["train"], idx["val"], y_train, weighting, model, metric, k)
        auc = _safe_auroc(p, y_all[idx["val"]])
        if best is None or auc > best[0]:
            best = (auc, (weighting, model, metric, k))
    val_auc, (weighting, model, metric, k) = best
    p_test = knn_predict(table, idx["train"], idx["test"], y_train, weighting, model, metric, k)
    metrics = _test_metrics(p_test, y_all[idx["test"]], n_bootstrap, seed)
    return EvalReport(task, "knn", metrics,
                      {"weighting": weighting, "model": model, "metric": metric, "k": k, "val_auroc": val_auc, "mode": mode},
                      [seed], "bootstrap", notes)
