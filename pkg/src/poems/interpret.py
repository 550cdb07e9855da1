"""Interpretability exports: biomarker rankings, activation maps, gating
weights, subtype correlation maps and cluster-sorted latent embeddings.

Every ranking is deterministic: ties in magnitude fall back to feature-name
order, ties in an argmax fall back to the smaller feature index.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import model as M
from .errors import ContractError, ShapeError
from .sparsity import FactorLoadings, active_map

TOP_K = 10
ACTIVE_THRESHOLD = 0.01


def _matrix(W) -> np.ndarray:
    W = W.W if isinstance(W, FactorLoadings) else np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError("loadings must be D x K")
    return W


def _check_names(W, names):
    if len(names) != W.shape[0]:
        raise ShapeError(f"{len(names)} feature names for {W.shape[0]} loading rows")


def _clamp_top_k(top_k, d):
    if top_k > d:
        warnings.warn(f"top_k={top_k} exceeds {d} features; clamped")
        return d
    if top_k < 1:
        raise ContractError("top_k must be positive")
    return top_k


def _rank(values: np.ndarray, names: Sequence[str]) -> np.ndarray:
    """Indices ordered by value descending, then by feature name."""
    name_rank = np.argsort(np.argsort(np.asarray(names, dtype=object), kind="stable"), kind="stable")
    return np.lexsort((name_rank, -values))


@dataclass
class BiomarkerReport:
    omic: str
    # factor -> [(feature name, |loading|), ...] best first
    factors: List[List[Tuple[str, float]]]

    def rows(self):
        for k, ranked in enumerate(self.factors):
            for r, (name, val) in enumerate(ranked, start=1):
                yield k, r, name, val

    def text(self) -> str:
        lines = [f"omic {self.omic}"]
        for k, ranked in enumerate(self.factors):
            lines.append(f"  factor {k}")
            lines += [f"    {r}. {name} {val:.6g}" for r, (name, val) in enumerate(ranked, start=1)]
        return "\n".join(lines)


def top_features_per_factor(W, names: Sequence[str], top_k: int = TOP_K, omic: str = "") -> BiomarkerReport:
    W = _matrix(W)
    _check_names(W, names)
    top_k = _clamp_top_k(top_k, W.shape[0])
    absw = np.abs(W)
    factors = []
    for k in range(W.shape[1]):
        order = _rank(absw[:, k], names)[:top_k]
        factors.append([(names[j], float(absw[j, k])) for j in order])
    return BiomarkerReport(omic, factors)


def aggregated_strength(W, names: Sequence[str], top_k: int = TOP_K) -> List[Tuple[str, float]]:
    """Features ranked by the sum of absolute loadings over all factors."""
    W = _matrix(W)
    _check_names(W, names)
    top_k = _clamp_top_k(top_k, W.shape[0])
    agg = np.abs(W).sum(axis=1)
    return [(names[j], float(agg[j])) for j in _rank(agg, names)[:top_k]]


def top_feature_per_dimension(W, names: Sequence[str]) -> List[Tuple[str, float]]:
    W = _matrix(W)
    _check_names(W, names)
    absw = np.abs(W)
    best = np.argmax(absw, axis=0)  # first index on ties
    return [(names[j], float(absw[j, k])) for k, j in enumerate(best)]


@dataclass
class GatingReport:
    sample_ids: List[str]
    omics: List[str]
    alpha: np.ndarray  # N x V

    @property
    def means(self) -> np.ndarray:
        return self.alpha.mean(axis=0)


def gating_report(model: M.ModelParams, dataset, rows=None) -> GatingReport:
    """Per-sample gating weights for the requested rows (all when None)."""
    rows = np.arange(dataset.n_samples) if rows is None else np.asarray(rows, dtype=np.int64)
    xs = dataset.values(rows)
    posts = [M.encode(x, enc, name) for x, enc, name in zip(xs, model.encoders, model.omics)]
    alpha = M.gate(posts, model.gating).alpha
    ids = [dataset.sample_ids[i] for i in rows]
    return GatingReport(ids, list(model.omics), alpha)


@dataclass
class CorrelationMatrix:
    subtypes: List[str]
    values: np.ndarray


def subtype_correlation(matrix, labels, names: Sequence[str] = ()) -> CorrelationMatrix:
    """Pearson correlation between per-subtype mean profiles."""
    X = np.asarray(matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or labels.shape != (X.shape[0],):
        raise ShapeError("matrix must be N x D with one label per row")
    n_sub = len(names) if names else int(labels.max()) + 1
    names = list(names) if names else [str(s) for s in range(n_sub)]
    counts = np.bincount(labels, minlength=n_sub)
    if (counts == 0).any():
        raise ContractError(f"subtype(s) without samples: {[names[s] for s in np.flatnonzero(counts == 0)]}")
    means = np.stack([X[labels == s].mean(axis=0) for s in range(n_sub)])
    centred = means - means.mean(axis=1, keepdims=True)
    norms = np.sqrt((centred ** 2).sum(axis=1))
    flat = norms == 0
    if flat.any():
        warnings.warn(f"subtype mean profile(s) with zero variance: {[names[s] for s in np.flatnonzero(flat)]}; "
                      "their correlations are set to 0")
    safe = np.where(flat, 1.0, norms)
    unit = centred / safe[:, None]
    R = np.clip(unit @ unit.T, -1.0, 1.0)
    R[flat, :] = 0.0
    R[:, flat] = 0.0
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return CorrelationMatrix(names, R)


def cluster_sorted_order(sample_ids: Sequence[str], clusters) -> np.ndarray:
    """Row order grouping samples by ascending cluster, id order within."""
    clusters = np.asarray(clusters)
    if clusters.shape != (len(sample_ids),):
        raise ShapeError("one cluster label per sample required")
    id_rank = np.argsort(np.argsort(np.asarray(sample_ids, dtype=object), kind="stable"), kind="stable")
    return np.lexsort((id_rank, clusters))


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------


def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def write_biomarkers(report: BiomarkerReport, path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["factor", "rank", "feature", "abs_loading"])
        for k, r, name, val in report.rows():
            w.writerow([k, r, name, repr(val)])


def write_active_map(W, names: Sequence[str], path, threshold: float = ACTIVE_THRESHOLD) -> None:
    A = active_map(_matrix(W), threshold)
    fh, w = _writer(path)
    with fh:
        w.writerow(["feature", *(f"z{k}" for k in range(A.shape[1]))])
        for name, row in zip(names, A):
            w.writerow([name, *row.astype(int).tolist()])


def write_gating(report: GatingReport, path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["sample_id", *report.omics])
        for sid, row in zip(report.sample_ids, report.alpha):
            w.writerow([sid, *(repr(float(a)) for a in row)])
        w.writerow(["mean", *(repr(float(a)) for a in report.means)])


def write_correlation(corr: CorrelationMatrix, path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["subtype", *corr.subtypes])
        for name, row in zip(corr.subtypes, corr.values):
            w.writerow([name, *(repr(float(v)) for v in row)])


def export_latents(sample_ids: Sequence[str], embeddings, clusters, path) -> np.ndarray:
    """Writes the embeddings with rows grouped by cluster; returns the order."""
    Z = np.asarray(embeddings, dtype=np.float64)
    order = cluster_sorted_order(sample_ids, clusters)
    clusters = np.asarray(clusters)
    fh, w = _writer(path)
    with fh:
        w.writerow(["sample_id", "cluster", *(f"z{k}" for k in range(Z.shape[1]))])
        for i in order:
            w.writerow([sample_ids[i], int(clusters[i]), *(repr(float(v)) for v in Z[i])])
    return order


def read_latents(path) -> Tuple[List[str], np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    clusters = np.array([int(r[1]) for r in body], dtype=np.int64)
    Z = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 2)
    return ids, clusters, Z


def write_all(model: M.ModelParams, dataset, rows, clusters, out_dir, top_k: int = TOP_K) -> Dict[str, Path]:
    """Every interpretability artifact for ``rows`` of ``dataset``.

    ``clusters`` are the cluster labels of those rows; the subtype maps need
    dataset labels and are skipped without them.
    """
    from .objective import fused_posterior

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = np.asarray(rows, dtype=np.int64)
    written: Dict[str, Path] = {}
    summary = []
    for v, mat in enumerate(dataset.matrices):
        W = model.loadings[v].W
        rep = top_features_per_factor(W, mat.feature_names, top_k, mat.name)
        p = out / f"biomarkers_{mat.name}.csv"
        write_biomarkers(rep, p)
        written[p.name] = p
        p = out / f"active_map_{mat.name}.csv"
        write_active_map(W, mat.feature_names, p)
        written[p.name] = p
        summary.append(rep.text())
        agg = aggregated_strength(W, mat.feature_names, top_k)
        summary.append("  aggregated strength")
        summary += [f"    {r}. {name} {val:.6g}" for r, (name, val) in enumerate(agg, start=1)]
        summary.append("  strongest feature per factor")
        summary += [f"    factor {k}: {name} {val:.6g}"
                    for k, (name, val) in enumerate(top_feature_per_dimension(W, mat.feature_names))]
    p = out / "biomarkers.txt"
    p.write_text("\n".join(summary) + "\n", encoding="utf-8")
    written[p.name] = p

    gate_rep = gating_report(model, dataset, rows)
    p = out / "gating.csv"
    write_gating(gate_rep, p)
    written[p.name] = p

    _, _, fused = fused_posterior(model, dataset.values(rows))
    ids = [dataset.sample_ids[i] for i in rows]
    p = out / "latents_sorted.csv"
    export_latents(ids, fused.mu, clusters, p)
    written[p.name] = p

    if dataset.labels is not None:
        labels = np.asarray(dataset.labels)[rows]
        names = list(dataset.label_names) or None
        present = np.unique(labels)
        # keep only subtypes represented in these rows
        remap = {c: i for i, c in enumerate(present)}
        lab = np.array([remap[c] for c in labels], dtype=np.int64)
        sub_names = [names[c] for c in present] if names else [str(c) for c in present]
        inputs = np.hstack(dataset.values(rows))
        for tag, mat in (("input", inputs), ("latent", fused.mu)):
            p = out / f"subtype_corr_{tag}.csv"
            write_correlation(subtype_correlation(mat, lab, sub_names), p)
            written[p.name] = p
    return written
