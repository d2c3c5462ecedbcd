import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fnf.data import (
    CRIME_KEEP,
    DataConfig,
    SchemaError,
    TabularDataset,
    bin_representative,
    check_columns,
    discretise,
    load_cache,
    load_dataset,
    load_schema,
    make_synthetic,
    quantile_edges,
    save_cache,
    split_hash,
    split_indices,
    split_sizes,
    synthetic_label,
)

REAL = DataConfig()


def have(name):
    return all(p.exists() for p in REAL.raw_paths(name))


# --------------------------------------------------------------------------- synthetic generator


def test_synthetic_sign_rule_and_balance():
    ds = make_synthetic(10_000, 0)
    assert np.array_equal(ds.y, (np.sign(ds.x[:, 0]) == np.sign(ds.x[:, 1])).astype(int))
    for g, sign in ((0, 1), (1, -1)):
        mean = ds.group(g).mean(axis=0)
        assert abs(mean[0]) < 0.1 and abs(mean[1] - 3 * sign) < 0.05
        assert abs(ds.y[ds.a == g].mean() - 0.5) < 0.02


def test_synthetic_label_examples():
    assert synthetic_label(np.array([[1.0, 2.0], [-1.0, -2.0], [-1.0, 2.0], [3.0, -0.5]])).tolist() == [1, 1, 0, 0]


# --------------------------------------------------------------------------- splits


def test_split_sizes_match_published_counts():
    assert split_sizes(86022) == (55053, 13764, 17205)  # law
    assert split_sizes(5278) == (3377, 845, 1056)  # compas
    assert split_sizes(1994) == (1276, 319, 399)  # crime
    # adult keeps its test file; validation is 20% of the training file
    assert split_sizes(30162, has_test=True) == (24129, 6033, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(5, 5000), st.integers(0, 2**16))
def test_split_indices_partition_rows(n, seed):
    tr, va, te = split_indices(n, seed)
    allidx = np.concatenate([tr, va, te])
    assert sorted(allidx.tolist()) == list(range(n))
    assert (len(tr), len(va), len(te)) == split_sizes(n)


def test_split_hash_is_seed_determined():
    assert split_hash(*split_indices(1000, 3)) == split_hash(*split_indices(1000, 3))
    assert split_hash(*split_indices(1000, 3)) != split_hash(*split_indices(1000, 4))


# --------------------------------------------------------------------------- discretisation


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=300), st.integers(2, 10))
def test_quantile_bins_nonempty_and_invertible(values, n_bins):
    v = np.asarray(values)
    edges = quantile_edges(v, n_bins)
    codes = discretise(v, edges)
    assert set(np.unique(codes)) == set(range(len(edges) + 1))
    assert np.array_equal(discretise(bin_representative(codes, edges), edges), codes)


def test_discretise_boundaries():
    edges = np.array([1.0, 2.0])
    assert discretise([0.5, 1.0, 1.5, 2.0, 9.0], edges).tolist() == [0, 1, 1, 2, 2]


def test_heavy_zero_column_keeps_first_bin():
    v = np.r_[np.zeros(70), np.arange(1, 31)]
    edges = quantile_edges(v, 5)
    codes = discretise(v, edges)
    assert np.all(edges > 0) and np.all(codes[:70] == 0)
    assert set(np.unique(codes)) == set(range(len(edges) + 1))


# --------------------------------------------------------------------------- schemas and cache


def test_schema_drift_lists_columns():
    cols = load_schema("law")["columns"]
    check_columns("law", cols)
    with pytest.raises(SchemaError, match=r"unexpected=\['lsat_score'\].*missing=\['lsat'\]"):
        check_columns("law", [c if c != "lsat" else "lsat_score" for c in cols])


def test_cache_round_trip(tmp_path):
    splits = [make_synthetic(50, s, tag) for s, tag in ((0, "train"), (1, "val"), (2, "test"))]
    save_cache(splits, tmp_path)
    back = load_cache(tmp_path)
    for a, b in zip(splits, back):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.a, b.a) and np.array_equal(a.y, b.y)
    schema = json.loads((tmp_path / "schema.json").read_text())
    assert schema["splits"] == {"train": 100, "val": 100, "test": 100}


def test_categorical_cache_keeps_integer_codes(tmp_path):
    x = np.array([[0, 2], [1, 0], [1, 1]])
    ds = [TabularDataset(x, [0, 1, 1], [1, 0, 1], tag, ["u", "v"]) for tag in ("train", "val", "test")]
    save_cache(ds, tmp_path)
    tr = load_cache(tmp_path)[0]
    assert tr.x.dtype.kind == "i" and tr.categorical and tr.cardinalities == [2, 3]


def test_missing_cache_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match=str(tmp_path / "nope")):
        load_cache(tmp_path / "nope")


def test_cache_column_mismatch_detected(tmp_path):
    save_cache([make_synthetic(5, s, t) for s, t in ((0, "train"), (1, "val"), (2, "test"))], tmp_path)
    text = (tmp_path / "val.csv").read_text().replace("x1,x2", "x1,zz", 1)
    (tmp_path / "val.csv").write_text(text)
    with pytest.raises(SchemaError):
        load_cache(tmp_path)


def test_invalid_rows_rejected():
    with pytest.raises(SchemaError):
        TabularDataset(np.zeros((2, 1)), [0, 2], [0, 1])
    with pytest.raises(SchemaError):
        TabularDataset(np.array([[np.nan], [0.0]]), [0, 1], [0, 1])


# --------------------------------------------------------------------------- parsers on fixture files


def write_crime(root, n=60, seed=0):
    names = load_schema("crime")["columns"]
    rng = np.random.default_rng(seed)
    path = root / "raw" / "crime" / "communities.data"
    path.parent.mkdir(parents=True)
    rows = []
    for i in range(n):
        r = {c: f"{rng.random():.2f}" for c in names}
        r.update(state="8", county="?", community="?", communityname=f"Town{i}", fold=str(i % 10))
        r["OtherPerCap"] = "?" if i == 0 else "0.5"
        rows.append([r[c] for c in names])
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return rows, names


def test_crime_parser_keeps_six_features_and_race_rule(tmp_path):
    rows, names = write_crime(tmp_path)
    cfg = DataConfig(root=str(tmp_path))
    tr, va, te = load_dataset("crime", cfg)
    assert tr.columns == CRIME_KEEP and len(tr) + len(va) + len(te) == 60
    col = {n: np.array([float(r[names.index(n)]) for r in rows]) for n in
           ("racePctWhite", "racepctblack", "racePctAsian", "racePctHisp", "ViolentCrimesPerPop")}
    a = (col["racePctWhite"] / 5 < col["racepctblack"] + col["racePctAsian"] + col["racePctHisp"]).astype(int)
    y = (col["ViolentCrimesPerPop"] < np.median(col["ViolentCrimesPerPop"])).astype(int)
    for ds in (tr, va, te):
        assert np.array_equal(ds.a, a[ds.row_ids]) and np.array_equal(ds.y, y[ds.row_ids])
    orig = load_dataset("crime", cfg, "original")[0]
    assert "OtherPerCap" not in orig.columns and "fold" not in orig.columns and "PctIlleg" not in orig.columns


def test_crime_field_count_drift(tmp_path):
    path = tmp_path / "raw" / "crime" / "communities.data"
    path.parent.mkdir(parents=True)
    path.write_text("1,2,3\n")
    with pytest.raises(SchemaError):
        load_dataset("crime", DataConfig(root=str(tmp_path)))


def write_law(root, n=200, seed=0):
    rng = np.random.default_rng(seed)
    path = root / "raw" / "law" / "law.csv"
    path.parent.mkdir(parents=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["College", "Year", "LSAT", "GPA", "Race", "Gender", "Resident", "Admit", "Enroll"])
        for i in range(n):
            college = ["A", "B", "C"][i % 3]
            admit = int(rng.random() < {"A": 0.8, "B": 0.5, "C": 0.2}[college])
            w.writerow([college, 2005, 150 + i % 20, 3.0, "White" if i % 4 else "Black", "female", "1", admit, 0])
        w.writerow(["A", 2005, "NA", 3.1, "White", "male", "0", 1, 0])


def test_law_parser_college_rank_and_attribute(tmp_path):
    write_law(tmp_path)
    tr, va, te = load_dataset("law", DataConfig(root=str(tmp_path)))
    assert tr.columns == ["lsat", "gpa", "college_rank"] and len(tr) + len(va) + len(te) == 200
    rank = tr.x[:, 2]
    # college A admits most often on train rows, so it gets rank 0
    assert set(np.unique(rank)) == {0.0, 1.0, 2.0}
    assert np.all((tr.a == 1) == (tr.row_ids % 4 == 0))


def test_missing_raw_file_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError, match="law.csv"):
        load_dataset("law", DataConfig(root=str(tmp_path)))


# --------------------------------------------------------------------------- real data (when present)


@pytest.mark.skipif(not have("adult"), reason="Adult raw files not present")
def test_adult_splits_and_marginals():
    tr, va, te = load_dataset("adult", REAL)
    assert (len(tr), len(va), len(te)) == (24129, 6033, 15060)
    assert tr.categorical and len(tr.columns) == 7
    assert abs(tr.a.mean() - 0.32) < 0.02


@pytest.mark.skipif(not have("compas"), reason="Compas raw file not present")
def test_compas_splits_and_groups():
    tr, va, te = load_dataset("compas", REAL)
    assert (len(tr), len(va), len(te)) == (3377, 845, 1056)
    assert tr.categorical and tr.cardinalities[0] == 5
    assert set(np.unique(tr.a)) == {0, 1}


@pytest.mark.skipif(not have("compas"), reason="Compas raw file not present")
def test_load_is_deterministic():
    a = load_dataset("compas", REAL)
    b = load_dataset("compas", REAL)
    assert split_hash(*[d.row_ids for d in a]) == split_hash(*[d.row_ids for d in b])
    c = load_dataset("compas", DataConfig(seed=1))
    assert split_hash(*[d.row_ids for d in a]) != split_hash(*[d.row_ids for d in c])
