"""Subtyping metrics on latent embeddings: k-means, NMI, Hungarian accuracy, KNN."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .errors import ContractError, ShapeError

DEFAULT_SEEDS = (0, 12, 21, 42, 1234)
METRICS = ("acc_kmeans", "nmi_kmeans", "acc_knn")


def _labels(y, name="labels") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"{name} must be 1-d")
    if y.size and (y.min() < 0 or not np.issubdtype(y.dtype, np.integer)):
        raise ContractError(f"{name} must be non-negative integers")
    return y.astype(np.int64)


def _pair(y, yhat):
    y, yhat = _labels(y, "y"), _labels(yhat, "yhat")
    if y.shape != yhat.shape:
        raise ContractError(f"label vectors differ in length: {y.size} vs {yhat.size}")
    return y, yhat


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centre drawn with probability proportional
    to the squared distance to the nearest centre chosen so far."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = kernels.sq_distances(X, centers[:1])[:, 0]
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point already coincides with a centre
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        d2 = np.minimum(d2, kernels.sq_distances(X, centers[c:c + 1])[:, 0])
    return centers


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    n_iter: int
    inertia_trace: np.ndarray

    @property
    def inertia(self) -> float:
        return float(self.inertia_trace[-1])


def kmeans_fit(X, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("embeddings must be N x K")
    if not 1 <= k <= X.shape[0]:
        raise ContractError(f"k={k} must lie in [1, N={X.shape[0]}]")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(X, k, rng)
    labels, C, n_iter, trace = kernels.lloyd(X, centers, max_iter)
    return KMeansResult(labels, C, n_iter, trace)


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300) -> np.ndarray:
    return kmeans_fit(X, k, seed, max_iter).labels


# --------------------------------------------------------------------------
# label agreement
# --------------------------------------------------------------------------


def contingency(y, yhat) -> np.ndarray:
    y, yhat = _pair(y, yhat)
    r, c = int(y.max(initial=-1)) + 1, int(yhat.max(initial=-1)) + 1
    return np.bincount(y * c + yhat, minlength=r * c).reshape(r, c)


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(y, yhat) -> float:
    """2 I(y; yhat) / (H(y) + H(yhat)) with natural logs.

    When both labelings are constant the ratio is 0/0; it is defined as 1 if
    the two partitions coincide and 0 otherwise.
    """
    y, yhat = _pair(y, yhat)
    n = y.size
    if n == 0:
        raise ContractError("empty label vectors")
    table = contingency(y, yhat)
    hy = _entropy(table.sum(axis=1), n)
    hc = _entropy(table.sum(axis=0), n)
    if hy + hc == 0.0:
        # both constant, hence identical as partitions
        return 1.0
    joint = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    return float(min(1.0, max(0.0, 2.0 * mi / (hy + hc))))


def hungarian_acc(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if y.size == 0:
        raise ContractError("empty label vectors")
    table = contingency(y, yhat)
    size = max(table.shape)
    square = np.zeros((size, size), dtype=np.int64)
    square[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(square, maximize=True)
    return float(square[rows, cols].sum() / y.size)


# --------------------------------------------------------------------------
# nearest neighbours
# --------------------------------------------------------------------------


def knn_predict(train_emb, train_labels, test_emb, k: int = 5) -> np.ndarray:
    """Majority vote among the k nearest training points (Euclidean).

    A tied vote goes to the class whose tied neighbours are closer on
    average, then to the smaller class index. Neighbour ranking itself is
    by distance, then training index.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_labels = _labels(train_labels, "train_labels")
    if train_emb.shape[0] == 0:
        raise ContractError("empty training set")
    if train_labels.size != train_emb.shape[0]:
        raise ShapeError("train embeddings and labels differ in length")
    if not 1 <= k <= train_emb.shape[0]:
        raise ContractError(f"k={k} must lie in [1, {train_emb.shape[0]}]")
    d2 = kernels.sq_distances(test_emb, train_emb)
    n_cls = int(train_labels.max()) + 1
    out = np.empty(test_emb.shape[0], dtype=np.int64)
    for i in range(test_emb.shape[0]):
        nearest = np.argsort(d2[i], kind="stable")[:k]
        lab = train_labels[nearest]
        dist = np.sqrt(d2[i, nearest])
        votes = np.bincount(lab, minlength=n_cls)
        top = np.flatnonzero(votes == votes.max())
        if top.size == 1:
            out[i] = top[0]
            continue
        means = np.array([dist[lab == c].mean() for c in top])
        out[i] = top[np.flatnonzero(means == means.min())[0]]
    return out


def knn_acc(train_emb, train_labels, test_emb, test_labels, k: int = 5) -> float:
    pred = knn_predict(train_emb, train_labels, test_emb, k)
    test_labels = _labels(test_labels, "test_labels")
    if test_labels.size != pred.size:
        raise ShapeError("test embeddings and labels differ in length")
    return float(np.mean(pred == test_labels))


# --------------------------------------------------------------------------
# aggregate report
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    seeds: List[int]
    per_seed: Dict[str, List[float]] = field(default_factory=dict)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.per_seed[metric]))

    def std(self, metric: str) -> float:
        # population std over the declared seeds
        return float(np.std(self.per_seed[metric]))

    def summary_lines(self) -> List[str]:
        lines = [f"seeds={','.join(str(s) for s in self.seeds)}"]
        for m in METRICS:
            lines.append(f"{m}={self.mean(m)!r} +- {self.std(m)!r}")
        return lines

    def write(self, summary_path, per_seed_path) -> None:
        with open(summary_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.summary_lines()) + "\n")
        with open(per_seed_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", *METRICS])
            for i, s in enumerate(self.seeds):
                w.writerow([s, *(repr(self.per_seed[m][i]) for m in METRICS)])


def evaluate_embeddings(train_emb, train_labels, test_emb, test_labels, n_classes: int,
                        seeds: Sequence[int] = DEFAULT_SEEDS, knn_k: int = 5) -> EvalReport:
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ContractError("seed list is empty")
    report = EvalReport(seeds, {m: [] for m in METRICS})
    knn = knn_acc(train_emb, train_labels, test_emb, test_labels, knn_k)
    for s in seeds:
        clusters = kmeans(test_emb, n_classes, seed=s)
        report.per_seed["acc_kmeans"].append(hungarian_acc(test_labels, clusters))
        report.per_seed["nmi_kmeans"].append(nmi(test_labels, clusters))
        # the KNN classifier has no randomness; it is repeated per seed so
        # every metric has one entry per declared seed
        report.per_seed["acc_knn"].append(knn)
    for m in METRICS:
        vals = report.per_seed[m]
        if not all(0.0 <= v <= 1.0 and math.isfinite(v) for v in vals):
            raise ContractError(f"metric {m} left [0, 1]: {vals}")
    return report


def evaluate(model, dataset, split, seeds: Sequence[int] = DEFAULT_SEEDS, knn_k: int = 5) -> EvalReport:
    """Embeds train and test samples with the fused posterior mean and scores
    the test embeddings against the dataset labels."""
    from .objective import fused_posterior

    if dataset.labels is None:
        raise ContractError("evaluation needs subtype labels")
    train_idx = np.asarray(split.train, dtype=np.int64)
    test_idx = np.asarray(split.test, dtype=np.int64)
    _, _, tr = fused_posterior(model, dataset.values(train_idx))
    _, _, te = fused_posterior(model, dataset.values(test_idx))
    labels = np.asarray(dataset.labels, dtype=np.int64)
    return evaluate_embeddings(tr.mu, labels[train_idx], te.mu, labels[test_idx],
                               dataset.n_classes, seeds, knn_k)
