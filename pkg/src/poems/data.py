"""Multi-omics ingestion, alignment, splitting, standardisation and a
synthetic generator with planted sparse loadings.

CSV layout: UTF-8, header ``sample_id,<feature names...>``, one sample per
row, comma separated, no quoting. Label files have header
``sample_id,subtype``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, IngestionError


@dataclass
class OmicsMatrix:
    name: str
    sample_ids: List[str]
    feature_names: List[str]
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.sample_ids), len(self.feature_names)):
            raise ContractError(
                f"{self.name}: values {self.values.shape} vs "
                f"{len(self.sample_ids)} ids x {len(self.feature_names)} features"
            )

    @property
    def shape(self):
        return self.values.shape

    def take(self, rows) -> "OmicsMatrix":
        rows = list(rows)
        return OmicsMatrix(self.name, [self.sample_ids[i] for i in rows], list(self.feature_names),
                           self.values[rows])


@dataclass
class MultiOmicsDataset:
    matrices: List[OmicsMatrix]
    labels: Optional[np.ndarray] = None
    label_names: List[str] = field(default_factory=list)
    dropped: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.matrices:
            raise ContractError("dataset needs at least one omic")
        ids = self.matrices[0].sample_ids
        for m in self.matrices[1:]:
            if m.sample_ids != ids:
                raise ContractError(f"omic {m.name} is not aligned with {self.matrices[0].name}")
        if self.labels is not None and len(self.labels) != len(ids):
            raise ContractError("labels must cover every sample")

    @property
    def sample_ids(self) -> List[str]:
        return self.matrices[0].sample_ids

    @property
    def omics(self) -> List[str]:
        return [m.name for m in self.matrices]

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_classes(self) -> int:
        return len(self.label_names) if self.label_names else int(self.labels.max()) + 1

    def values(self, rows=None) -> List[np.ndarray]:
        if rows is None:
            return [m.values for m in self.matrices]
        return [m.values[rows] for m in self.matrices]


# --------------------------------------------------------------------------
# CSV IO
# --------------------------------------------------------------------------


def _reader(fh):
    return csv.reader(fh, delimiter=",", quoting=csv.QUOTE_NONE)


def load_omics_csv(path, name: Optional[str] = None) -> OmicsMatrix:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    name = name or path.stem
    ids, rows, seen = [], [], set()
    with open(path, encoding="utf-8", newline="") as fh:
        it = _reader(fh)
        try:
            header = next(it)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if len(header) < 2:
            raise IngestionError(f"{path}:1: header needs sample_id plus at least one feature")
        features = header[1:]
        width = len(header)
        for lineno, row in enumerate(it, start=2):
            if not row:
                continue
            if len(row) != width:
                raise IngestionError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            sid = row[0]
            if sid in seen:
                raise IngestionError(f"{path}:{lineno}: duplicate sample id {sid!r}")
            seen.add(sid)
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError:
                bad = next(c for c in row[1:] if not _is_number(c))
                raise IngestionError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError(f"{path}:{lineno}: missing or non-finite value")
            ids.append(sid)
            rows.append(vals)
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(features))
    return OmicsMatrix(name, ids, features, values)


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def write_omics_csv(matrix: OmicsMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", *matrix.feature_names])
        for sid, row in zip(matrix.sample_ids, matrix.values):
            w.writerow([sid, *(repr(float(v)) for v in row)])


def load_labels(path) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    out: Dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        it = _reader(fh)
        header = next(it, None)
        if header is None or len(header) != 2:
            raise IngestionError(f"{path}:1: expected header 'sample_id,subtype'")
        for lineno, row in enumerate(it, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise IngestionError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            if row[0] in out:
                raise IngestionError(f"{path}:{lineno}: duplicate sample id {row[0]!r}")
            out[row[0]] = row[1]
    return out


def write_labels(ids: Sequence[str], names: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "subtype"])
        for sid, lab in zip(ids, names):
            w.writerow([sid, lab])


# --------------------------------------------------------------------------
# alignment / splitting / scaling
# --------------------------------------------------------------------------


def align(matrices: Sequence[OmicsMatrix], labels: Optional[Dict[str, str]] = None) -> MultiOmicsDataset:
    """Restrict every omic (and the labels) to their common samples, sorted by id."""
    if not matrices:
        raise ContractError("nothing to align")
    id_sets = [set(m.sample_ids) for m in matrices]
    if labels is not None:
        id_sets.append(set(labels))
    common = set.intersection(*id_sets)
    if not common:
        raise ContractError("omics share no sample ids")
    everything = set.union(*id_sets)
    keep = sorted(common)
    out = []
    for m in matrices:
        pos = {sid: i for i, sid in enumerate(m.sample_ids)}
        out.append(m.take(pos[s] for s in keep))
    lab_arr, names = None, []
    if labels is not None:
        names = sorted({labels[s] for s in keep})
        code = {n: i for i, n in enumerate(names)}
        lab_arr = np.array([code[labels[s]] for s in keep], dtype=np.int64)
    return MultiOmicsDataset(out, lab_arr, names, sorted(everything - common))


@dataclass
class SplitSpec:
    train: List[int]
    val: List[int]
    test: List[int]
    seed: int

    def as_dict(self):
        return {"train": self.train, "val": self.val, "test": self.test, "seed": self.seed}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _allocate(counts: Sequence[int], total: int) -> List[int]:
    """Split ``total`` across groups proportionally (largest remainder)."""
    n = sum(counts)
    exact = [total * c / n for c in counts]
    base = [int(math.floor(e)) for e in exact]
    rest = total - sum(base)
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def _carve(pool: List[np.ndarray], take: List[int], rng) -> Tuple[List[np.ndarray], List[int]]:
    kept, taken = [], []
    for members, t in zip(pool, take):
        perm = rng.permutation(members)
        taken.extend(perm[:t].tolist())
        kept.append(np.sort(perm[t:]))
    return kept, taken


def split(dataset: MultiOmicsDataset, seed: int = 21, test_frac: float = 0.2, val_frac: float = 0.2) -> SplitSpec:
    """80/20 train/test, then 20% of train held out for validation.

    Stratified by subtype when labels exist and every subtype has at least
    three samples; uniform otherwise.
    """
    n = dataset.n_samples
    if n < 10:
        raise ContractError(f"need at least 10 samples to split, got {n}")
    rng = np.random.default_rng(seed)
    n_test = _round_half_up(test_frac * n)
    n_val = _round_half_up(val_frac * (n - n_test))
    groups = [np.arange(n)]
    if dataset.labels is not None:
        classes = np.unique(dataset.labels)
        strata = [np.flatnonzero(dataset.labels == c) for c in classes]
        if min(len(s) for s in strata) < 3:
            warnings.warn("a subtype has fewer than 3 samples; falling back to a uniform split")
        else:
            groups = strata
    groups, test = _carve(groups, _allocate([len(g) for g in groups], n_test), rng)
    groups, val = _carve(groups, _allocate([len(g) for g in groups], n_val), rng)
    train = sorted(int(i) for g in groups for i in g)
    return SplitSpec(train, sorted(int(i) for i in val), sorted(int(i) for i in test), seed)


@dataclass
class Standardizer:
    means: List[np.ndarray]
    stds: List[np.ndarray]  # zero for constant features

    def transform(self, xs: Sequence[np.ndarray]) -> List[np.ndarray]:
        out = []
        for x, m, s in zip(xs, self.means, self.stds):
            safe = np.where(s > 0, s, 1.0)
            out.append(np.where(s > 0, (x - m) / safe, 0.0))
        return out

    def inverse_transform(self, xs: Sequence[np.ndarray]) -> List[np.ndarray]:
        return [x * s + m for x, m, s in zip(xs, self.means, self.stds)]


def standardize(dataset: MultiOmicsDataset, split_spec: SplitSpec):
    """Z-score every feature with training-split statistics (population
    variance). Returns the transformed dataset and the fitted scaler."""
    if not split_spec.train:
        raise ContractError("training split is empty")
    idx = np.asarray(split_spec.train)
    means, stds = [], []
    for m in dataset.matrices:
        tr = m.values[idx]
        mu = tr.mean(axis=0)
        sd = tr.std(axis=0)
        const = sd == 0
        if const.any():
            warnings.warn(f"{m.name}: {int(const.sum())} constant feature(s) mapped to zero")
        means.append(mu)
        stds.append(sd)
    scaler = Standardizer(means, stds)
    new_vals = scaler.transform([m.values for m in dataset.matrices])
    mats = [OmicsMatrix(m.name, list(m.sample_ids), list(m.feature_names), v)
            for m, v in zip(dataset.matrices, new_vals)]
    return MultiOmicsDataset(mats, dataset.labels, list(dataset.label_names), list(dataset.dropped)), scaler


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


@dataclass
class SynthSpec:
    n_samples: int = 500
    feature_dims: Tuple[int, ...] = (200, 150)
    latent_dim: int = 8
    n_classes: int = 4
    active_per_feature: int = 1  # consecutive factors loaded by each feature
    separation: float = 3.0
    noise_scale: float = 0.1
    seed: int = 0
    omics: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        self.feature_dims = tuple(int(d) for d in self.feature_dims)
        if self.latent_dim <= 0 or self.n_samples <= 0 or self.n_classes <= 0:
            raise ContractError("latent_dim, n_samples and n_classes must be positive")
        if not 1 <= self.active_per_feature <= self.latent_dim:
            raise ContractError("active_per_feature must lie in [1, latent_dim]")
        if any(d < self.latent_dim for d in self.feature_dims):
            raise ContractError("each omic needs at least latent_dim features for the block layout")
        if self.omics is None:
            self.omics = tuple(f"omic{v + 1}" for v in range(len(self.feature_dims)))

    @property
    def inactive_fraction(self) -> float:
        return 1.0 - self.active_per_feature / self.latent_dim


def planted_support(n_features: int, latent_dim: int, width: int) -> np.ndarray:
    """Block layout: features are cut into ``latent_dim`` contiguous groups and
    group g loads factors g, g+1, ..., g+width-1 (mod K)."""
    mask = np.zeros((n_features, latent_dim), dtype=bool)
    for j in range(n_features):
        g = j * latent_dim // n_features
        for t in range(width):
            mask[j, (g + t) % latent_dim] = True
    return mask


def synth_generate(spec: SynthSpec):
    """Returns ``(dataset, true_loadings, labels)``; labels are mixture components."""
    rng = np.random.default_rng(spec.seed)
    n, k, c = spec.n_samples, spec.latent_dim, spec.n_classes
    labels = rng.permutation(np.arange(n) % c)
    means = spec.separation * rng.standard_normal((c, k))
    z = means[labels] + rng.standard_normal((n, k))
    ids = [f"s{i:05d}" for i in range(n)]
    mats, loadings = [], []
    for name, d in zip(spec.omics, spec.feature_dims):
        support = planted_support(d, k, spec.active_per_feature)
        mags = rng.uniform(0.5, 1.5, size=(d, k)) * rng.choice([-1.0, 1.0], size=(d, k))
        W = np.where(support, mags, 0.0)
        signal = z @ W.T
        noise_sd = spec.noise_scale * signal.std(axis=0)
        x = signal + rng.standard_normal((n, d)) * noise_sd
        mats.append(OmicsMatrix(name, list(ids), [f"{name}_f{j:04d}" for j in range(d)], x))
        loadings.append(W)
    names = [f"class{i}" for i in range(c)]
    return MultiOmicsDataset(mats, labels.astype(np.int64), names), loadings, labels.astype(np.int64)
