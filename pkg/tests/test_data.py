import warnings

import numpy as np
import pytest

from poems import data as D
from poems.errors import ContractError, IngestionError


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def matrix(name, ids, values):
    values = np.asarray(values, float)
    return D.OmicsMatrix(name, list(ids), [f"f{j}" for j in range(values.shape[1])], values)


def labelled(n, classes):
    ids = [f"s{i:03d}" for i in range(n)]
    m = matrix("a", ids, np.arange(2 * n, dtype=float).reshape(n, 2))
    return D.MultiOmicsDataset([m], np.asarray(classes, dtype=np.int64), [f"c{c}" for c in sorted(set(classes))])


# ---------------------------------------------------------------- csv

def test_minimal_file(tmp_path):
    m = D.load_omics_csv(write(tmp_path / "x.csv", "sample_id,g1,g2\na,1,2\nb,3,4\n"), "mrna")
    assert m.name == "mrna" and m.sample_ids == ["a", "b"] and m.feature_names == ["g1", "g2"]
    assert np.array_equal(m.values, [[1, 2], [3, 4]])


@pytest.mark.parametrize("body,msg", [
    ("sample_id,g1\na,1\na,2\n", "3: duplicate"),
    ("sample_id,g1,g2\na,1\n", "2: expected 3 fields"),
    ("sample_id,g1\na,1\nb,x\n", "3: non-numeric"),
    ("sample_id,g1\na,\n", "2: non-numeric"),
    ("sample_id,g1\na,nan\n", "2: missing or non-finite"),
])
def test_ingestion_errors_carry_line_numbers(tmp_path, body, msg):
    with pytest.raises(IngestionError, match=msg):
        D.load_omics_csv(write(tmp_path / "x.csv", body))


def test_missing_file_is_named(tmp_path):
    with pytest.raises(IngestionError, match="nope.csv"):
        D.load_omics_csv(tmp_path / "nope.csv")


def test_csv_round_trip_is_exact(tmp_path, rng):
    m = matrix("m", ["a", "b", "c"], rng.normal(size=(3, 4)) * 1e-7)
    D.write_omics_csv(m, tmp_path / "m.csv")
    back = D.load_omics_csv(tmp_path / "m.csv", "m")
    assert np.array_equal(back.values, m.values) and back.feature_names == m.feature_names


def test_labels_round_trip(tmp_path):
    D.write_labels(["a", "b"], ["LumA", "Basal"], tmp_path / "l.csv")
    assert D.load_labels(tmp_path / "l.csv") == {"a": "LumA", "b": "Basal"}


def test_brca_shapes_load(tmp_path, rng):
    # files shaped like the BRCA tables: 875 samples, 1000 / 1000 / 503 features
    ids = [f"TCGA-{i:04d}" for i in range(875)]
    shapes = {"mrna": 1000, "meth": 1000, "mirna": 503}
    for name, d in shapes.items():
        D.write_omics_csv(matrix(name, ids, rng.normal(size=(875, d)).round(3)), tmp_path / f"{name}.csv")
    ds = D.align([D.load_omics_csv(tmp_path / f"{n}.csv", n) for n in shapes])
    assert [m.shape for m in ds.matrices] == [(875, 1000), (875, 1000), (875, 503)]


# ---------------------------------------------------------------- align

def test_align_identical_ids_sorted():
    a = matrix("a", ["c", "a", "b"], [[3], [1], [2]])
    b = matrix("b", ["b", "c", "a"], [[20], [30], [10]])
    ds = D.align([a, b])
    assert ds.sample_ids == ["a", "b", "c"] and not ds.dropped
    assert np.array_equal(ds.matrices[1].values[:, 0], [10, 20, 30])


def test_align_intersection():
    ds = D.align([matrix("a", "abc", [[1], [2], [3]]), matrix("b", "bcd", [[1], [2], [3]])])
    assert ds.sample_ids == ["b", "c"] and ds.dropped == ["a", "d"]


def test_align_ignores_row_order(rng):
    ids = [f"s{i}" for i in range(10)]
    vals = rng.normal(size=(10, 3))
    perm = rng.permutation(10)
    d1 = D.align([matrix("a", ids, vals)])
    d2 = D.align([matrix("a", [ids[i] for i in perm], vals[perm])])
    assert d1.sample_ids == d2.sample_ids and np.array_equal(d1.matrices[0].values, d2.matrices[0].values)


def test_align_is_idempotent():
    ds = D.align([matrix("a", "cab", [[1], [2], [3]])], {"a": "x", "b": "y", "c": "x"})
    again = D.align(ds.matrices, {s: ds.label_names[l] for s, l in zip(ds.sample_ids, ds.labels)})
    assert again.sample_ids == ds.sample_ids and np.array_equal(again.labels, ds.labels)


def test_align_empty_intersection():
    with pytest.raises(ContractError):
        D.align([matrix("a", "ab", [[1], [2]]), matrix("b", "cd", [[1], [2]])])


def test_align_restricts_to_labelled_samples():
    ds = D.align([matrix("a", "abc", [[1], [2], [3]])], {"a": "x", "c": "y"})
    assert ds.sample_ids == ["a", "c"] and list(ds.labels) == [0, 1] and ds.dropped == ["b"]


# ---------------------------------------------------------------- split

def test_split_proportions_and_balance():
    ds = labelled(100, [0] * 50 + [1] * 50)
    sp = D.split(ds, 21)
    assert (len(sp.test), len(sp.val), len(sp.train)) == (20, 16, 64)
    for part, size in ((sp.test, 20), (sp.val, 16), (sp.train, 64)):
        ones = int(ds.labels[part].sum())
        assert abs(ones - size / 2) <= 1


def test_split_is_deterministic():
    ds = labelled(100, [0] * 30 + [1] * 70)
    assert D.split(ds, 7).as_dict() == D.split(ds, 7).as_dict()


def test_split_brca_sizes():
    sp = D.split(labelled(875, [i % 5 for i in range(875)]), 21)
    assert (len(sp.test), len(sp.val), len(sp.train)) == (175, 140, 560)


def test_split_disjoint_and_exhaustive():
    rng = np.random.default_rng(0)
    for seed in range(25):
        n = int(rng.integers(10, 200))
        ds = labelled(n, list(rng.integers(0, 3, n)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sp = D.split(ds, seed)
        allidx = sp.train + sp.val + sp.test
        assert sorted(allidx) == list(range(n))


def test_split_small_class_falls_back():
    ds = labelled(20, [0] * 18 + [1] * 2)
    with pytest.warns(UserWarning, match="fewer than 3"):
        sp = D.split(ds, 1)
    assert len(sp.test) == 4


def test_split_needs_ten_samples():
    with pytest.raises(ContractError):
        D.split(labelled(9, [0] * 9), 0)


# ---------------------------------------------------------------- standardize

def two_point(values_train, values_rest):
    vals = np.array(values_train + values_rest, float)[:, None]
    n = len(vals)
    ds = D.MultiOmicsDataset([matrix("a", [f"s{i}" for i in range(n)], vals)])
    tr = list(range(len(values_train)))
    return ds, D.SplitSpec(tr, [n - 1], list(range(len(values_train), n - 1)), 0)


def test_two_point_column_uses_population_variance():
    ds, sp = two_point([1.0, 3.0], [5.0, 7.0])
    out, _ = D.standardize(ds, sp)
    assert list(out.matrices[0].values[:2, 0]) == [-1.0, 1.0]
    # held-out rows use train statistics, not their own
    assert list(out.matrices[0].values[2:, 0]) == [3.0, 5.0]


def test_constant_column_maps_to_zero():
    ds, sp = two_point([2.0, 2.0], [5.0, 1.0])
    with pytest.warns(UserWarning, match="constant"):
        out, _ = D.standardize(ds, sp)
    assert not out.matrices[0].values.any()


def test_train_columns_standardized_and_invertible(rng):
    ids = [f"s{i:02d}" for i in range(40)]
    ds = D.MultiOmicsDataset([matrix("a", ids, rng.normal(3, 5, (40, 6)))])
    sp = D.split(ds, 3)
    out, scaler = D.standardize(ds, sp)
    tr = out.matrices[0].values[sp.train]
    assert np.abs(tr.mean(axis=0)).max() < 1e-9 and np.abs(tr.var(axis=0) - 1).max() < 1e-9
    back = scaler.inverse_transform(out.values())[0]
    assert np.abs(back - ds.matrices[0].values).max() < 1e-9


# ---------------------------------------------------------------- synth

def test_synth_noiseless_columns_are_linear():
    spec = D.SynthSpec(n_samples=30, feature_dims=(16,), latent_dim=4, noise_scale=0.0, seed=2)
    ds, W, labels = D.synth_generate(spec)
    x = ds.matrices[0].values
    # recover z from one column per block, then check every column
    z = np.linalg.lstsq(W[0], x.T, rcond=None)[0].T
    assert np.abs(z @ W[0].T - x).max() < 1e-10


def test_synth_inactive_fraction_exact():
    spec = D.SynthSpec(active_per_feature=2)
    _, W, _ = D.synth_generate(spec)
    for w in W:
        assert (w == 0).mean() == spec.inactive_fraction == 0.75


def test_synth_shapes_and_determinism():
    spec = D.SynthSpec(n_samples=50, feature_dims=(20, 12, 9), latent_dim=3, n_classes=2, seed=9)
    a, Wa, la = D.synth_generate(spec)
    b, Wb, lb = D.synth_generate(spec)
    assert [m.shape for m in a.matrices] == [(50, 20), (50, 12), (50, 9)]
    assert [w.shape for w in Wa] == [(20, 3), (12, 3), (9, 3)]
    assert all(np.array_equal(x, y) for x, y in zip(a.values(), b.values()))
    assert np.array_equal(la, lb)


def test_synth_rejects_impossible_blocks():
    with pytest.raises(ContractError):
        D.SynthSpec(feature_dims=(4,), latent_dim=8)
