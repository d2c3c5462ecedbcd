"""Tabular datasets: container, synthetic generator, loaders and the on-disk cache."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density import DensityModel, GaussianMixture


class SchemaError(ValueError):
    pass


@dataclass
class TabularDataset:
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    split: str = "train"
    columns: list = field(default_factory=list)
    kinds: list = field(default_factory=list)  # "continuous" | "categorical" per column
    cardinalities: list = field(default_factory=list)  # 0 for continuous columns
    bins: dict = field(default_factory=dict)  # column -> bin edges used for discretisation
    name: str = ""
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.a = np.asarray(self.a).astype(np.int64)
        self.y = np.asarray(self.y).astype(np.int64)
        n, d = self.x.shape
        if len(self.a) != n or len(self.y) != n:
            raise SchemaError("x, a and y must have the same number of rows")
        if not set(np.unique(self.a)) <= {0, 1} or not set(np.unique(self.y)) <= {0, 1}:
            raise SchemaError("a and y must be binary")
        if self.x.dtype.kind == "f" and not np.all(np.isfinite(self.x)):
            raise SchemaError("features contain missing or non-finite values")
        if not self.columns:
            self.columns = [f"x{i}" for i in range(d)]
        if not self.kinds:
            self.kinds = ["categorical" if self.x.dtype.kind in "iu" else "continuous"] * d
        if not self.cardinalities:
            self.cardinalities = [int(self.x[:, i].max()) + 1 if k == "categorical" and n else 0
                                  for i, k in enumerate(self.kinds)]
        if not (len(self.columns) == len(self.kinds) == len(self.cardinalities) == d):
            raise SchemaError("schema does not match the feature matrix")
        if self.row_ids is None:
            self.row_ids = np.arange(n)

    def __len__(self):
        return self.x.shape[0]

    @property
    def categorical(self) -> bool:
        return all(k == "categorical" for k in self.kinds)

    def group(self, g: int) -> np.ndarray:
        return self.x[self.a == g]

    def subset(self, idx, split=None) -> "TabularDataset":
        return TabularDataset(self.x[idx], self.a[idx], self.y[idx], split or self.split, list(self.columns),
                              list(self.kinds), list(self.cardinalities), dict(self.bins), self.name, self.row_ids[idx])

    def schema(self) -> dict:
        return {"name": self.name, "columns": self.columns, "kinds": self.kinds,
                "cardinalities": self.cardinalities, "bins": {k: list(v) for k, v in self.bins.items()}}

    def stats(self) -> dict:
        """Size and group/label marginals, in the layout of the usual dataset statistics table."""
        return {
            "size": len(self),
            "a=1": float(self.a.mean()),
            "y=1|a=0": float(self.y[self.a == 0].mean()) if np.any(self.a == 0) else float("nan"),
            "y=1|a=1": float(self.y[self.a == 1].mean()) if np.any(self.a == 1) else float("nan"),
            "y=1": float(self.y.mean()),
        }


# --------------------------------------------------------------------------- synthetic data

SYNTH_MEANS = {0: ((-3.0, 3.0), (3.0, 3.0)), 1: ((-3.0, -3.0), (3.0, -3.0))}


def synthetic_densities() -> tuple:
    """The exact group densities of the two-mixture example: equal-weight, unit covariance."""
    out = []
    for g in (0, 1):
        gm = GaussianMixture(np.array([0.5, 0.5]), np.array(SYNTH_MEANS[g]), np.stack([np.eye(2)] * 2))
        out.append(DensityModel(gm, g, None, 0, ["exact synthetic density"]))
    return tuple(out)


def synthetic_label(x) -> np.ndarray:
    x = np.asarray(x)
    return (np.sign(x[:, 0]) == np.sign(x[:, 1])).astype(np.int64)


def make_synthetic(n: int, seed: int = 0, split: str = "train") -> TabularDataset:
    """n points per group; group 0 above the x-axis, group 1 below, y = 1 iff sign(x1) == sign(x2)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    dens = synthetic_densities()
    xs = [dens[g].sample(n, rng) for g in (0, 1)]
    x = np.vstack(xs)
    a = np.repeat([0, 1], n)
    perm = rng.permutation(2 * n)
    return TabularDataset(x[perm], a[perm], synthetic_label(x)[perm], split, ["x1", "x2"], name="synthetic")


def synthetic_splits(n: int, seed: int = 0):
    """Independent train/val/test draws (80/20 then 20% of train for validation)."""
    n_test = math.ceil(0.2 * n)
    n_trval = n - n_test
    n_val = math.ceil(0.2 * n_trval)
    return (make_synthetic(n_trval - n_val, seed, "train"),
            make_synthetic(n_val, seed + 10_000, "val"),
            make_synthetic(n_test, seed + 20_000, "test"))


# --------------------------------------------------------------------------- configuration and splits

DATASETS = ("adult", "compas", "crime", "law", "synthetic")
RAW_FILES = {
    "adult": ("adult/adult.data", "adult/adult.test"),
    "compas": ("compas/compas-scores-two-years.csv",),
    "crime": ("crime/communities.data",),
    "law": ("law/law.csv",),
}
SCHEMA_DIR = Path(__file__).with_name("schemas")


def default_data_root() -> Path:
    return Path(os.environ.get("FNF_DATA_ROOT", "data"))


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None  # holds raw/<name>/... and cache/<name>/...
    seed: int = 0
    n_bins: int = 5
    synthetic_n: int = 4000
    test_fraction: float = 0.2
    val_fraction: float = 0.2

    @property
    def root_path(self) -> Path:
        return Path(self.root) if self.root is not None else default_data_root()

    def raw_paths(self, name: str) -> list:
        return [self.root_path / "raw" / rel for rel in RAW_FILES[name]]


def split_sizes(n: int, test_fraction: float = 0.2, val_fraction: float = 0.2, has_test: bool = False):
    """(train, val, test) sizes; fractions are rounded up, which reproduces the published split sizes."""
    n_test = 0 if has_test else math.ceil(test_fraction * n)
    n_trval = n - n_test
    n_val = math.ceil(val_fraction * n_trval)
    return n_trval - n_val, n_val, n_test


def split_indices(n: int, seed: int, test_fraction: float = 0.2, val_fraction: float = 0.2):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_tr, n_val, n_test = split_sizes(n, test_fraction, val_fraction)
    test = np.sort(perm[:n_test])
    trval = perm[n_test:]
    return np.sort(trval[n_val:]), np.sort(trval[:n_val]), test


def split_hash(*index_lists) -> str:
    h = hashlib.sha256()
    for idx in index_lists:
        h.update(np.asarray(idx, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()


# --------------------------------------------------------------------------- raw tables

@dataclass
class RawTable:
    """Parsed raw file: named columns (strings or floats), sensitive attribute and label."""

    columns: dict
    a: np.ndarray
    y: np.ndarray
    keep: list  # columns of the preprocessed variant
    discretise: list = field(default_factory=list)  # continuous kept columns to quantile-bin
    categorical: list = field(default_factory=list)  # string-valued columns (all variants)
    test_rows: np.ndarray | None = None  # boolean mask of rows from an original test file
    notes: list = field(default_factory=list)

    def __len__(self):
        return len(self.a)

    def rows(self, mask) -> "RawTable":
        cols = {k: v[mask] for k, v in self.columns.items()}
        tr = None if self.test_rows is None else self.test_rows[mask]
        return RawTable(cols, self.a[mask], self.y[mask], self.keep, self.discretise, self.categorical, tr,
                        list(self.notes))


def load_schema(name: str) -> dict:
    return json.loads((SCHEMA_DIR / f"{name}.json").read_text())


def check_columns(name: str, header) -> None:
    expected = load_schema(name)["columns"]
    header = list(header)
    unexpected = [c for c in header if c not in expected]
    missing = [c for c in expected if c not in header]
    if unexpected or missing:
        raise SchemaError(f"{name}: raw columns drifted from the schema; unexpected={unexpected}, missing={missing}")


def _require(paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"raw data file not found: {p}")


def _read_csv(path, header=True, na=("?",)):
    with open(path, newline="") as fh:
        rows = [[c.strip() for c in r] for r in csv.reader(fh) if r and not r[0].startswith("|")]
    head = rows.pop(0) if header else None
    return head, rows


def _as_float(col):
    return np.array([float(v) for v in col], dtype=np.float64)


def _parse_adult(cfg: DataConfig) -> RawTable:
    paths = cfg.raw_paths("adult")
    _require(paths)
    names = load_schema("adult")["columns"]
    parts = []
    for p in paths:
        _, rows = _read_csv(p, header=False)
        for r in rows:
            if len(r) != len(names):
                raise SchemaError(f"adult: expected {len(names)} fields, found {len(r)} in {p}")
        parts.append([r for r in rows if "?" not in r])
    rows = parts[0] + parts[1]
    cols = {n: np.array([r[i] for r in rows]) for i, n in enumerate(names)}
    cont = ["age", "fnlwgt", "education-num", "capital-gain", "capital-loss", "hours-per-week"]
    for c in cont:
        cols[c] = _as_float(cols[c])
    a = (cols.pop("sex") == "Female").astype(np.int64)
    y = np.array([v.rstrip(".") == ">50K" for v in cols.pop("income")], dtype=np.int64)
    test_rows = np.r_[np.zeros(len(parts[0]), bool), np.ones(len(parts[1]), bool)]
    cats = [c for c in cols if c not in cont]
    keep = ["relationship", "workclass", "marital-status", "race", "occupation", "education-num", "education"]
    return RawTable(cols, a, y, keep, [], cats + ["education-num"], test_rows,
                    ["rows with missing values dropped", "a=1 for female", "original train/test files kept"])


def _days(a_col, b_col):
    from datetime import datetime

    fmt = lambda s: datetime.fromisoformat(s)  # noqa: E731
    return np.array([(fmt(b) - fmt(a)).total_seconds() / 86400.0 for a, b in zip(a_col, b_col)])


def _parse_compas(cfg: DataConfig) -> RawTable:
    (path,) = cfg.raw_paths("compas")
    _require([path])
    head, rows = _read_csv(path)
    check_columns("compas", head)
    ix = {}
    for i, n in enumerate(head):
        ix.setdefault(n, i)  # first occurrence of duplicated names

    def ok(r):
        d = r[ix["days_b_screening_arrest"]]
        return (d != "" and -30 <= float(d) <= 30 and r[ix["is_recid"]] != "-1" and r[ix["c_charge_degree"]] != "O"
                and r[ix["score_text"]] != "N/A" and r[ix["race"]] in ("Caucasian", "African-American"))

    rows = [r for r in rows if ok(r)]
    need = ["c_jail_in", "c_jail_out", "in_custody", "out_custody"]
    rows = [r for r in rows if all(r[ix[c]] != "" for c in need)]
    col = lambda n: np.array([r[ix[n]] for r in rows])  # noqa: E731
    cols = {
        "age": _as_float(col("age")),
        "diff_custody": _days(col("in_custody"), col("out_custody")),
        "diff_jail": _days(col("c_jail_in"), col("c_jail_out")),
        "priors_count": _as_float(col("priors_count")),
        "sex": col("sex"),
        "c_charge_degree": col("c_charge_degree"),
        "v_score_text": col("v_score_text"),
        "juv_fel_count": _as_float(col("juv_fel_count")),
        "juv_misd_count": _as_float(col("juv_misd_count")),
        "juv_other_count": _as_float(col("juv_other_count")),
        "decile_score": _as_float(col("decile_score")),
        "v_decile_score": _as_float(col("v_decile_score")),
        "score_text": col("score_text"),
    }
    a = (col("race") == "African-American").astype(np.int64)
    y = 1 - col("two_year_recid").astype(np.int64)
    keep = ["age", "diff_custody", "diff_jail", "priors_count", "sex", "c_charge_degree", "v_score_text"]
    return RawTable(cols, a, y, keep, ["age", "diff_custody", "diff_jail", "priors_count"],
                    ["sex", "c_charge_degree", "v_score_text", "score_text"], None,
                    ["standard screening filters applied", "a=1 for African-American", "y=1 for no two-year recidivism"])


CRIME_KEEP = ["racePctWhite", "pctWInvInc", "PctFam2Par", "PctKids2Par", "PctYoungKids2Par", "PctKidsBornNeverMar"]
CRIME_NON_PREDICTIVE = ["state", "county", "community", "communityname", "fold"]
# the normalised UCI release names the never-married-parents share PctIlleg
CRIME_ALIASES = {"PctKidsBornNeverMar": "PctIlleg"}


def _parse_crime(cfg: DataConfig) -> RawTable:
    (path,) = cfg.raw_paths("crime")
    _require([path])
    names = load_schema("crime")["columns"]
    _, rows = _read_csv(path, header=False)
    for r in rows:
        if len(r) != len(names):
            raise SchemaError(f"crime: expected {len(names)} fields, found {len(r)}")
    complete = [i for i, n in enumerate(names) if all(r[i] != "?" for r in rows)]
    cols = {names[i]: np.array([r[i] for r in rows]) for i in complete if names[i] not in CRIME_NON_PREDICTIVE}
    cols = {k: _as_float(v) for k, v in cols.items()}
    for want, alias in CRIME_ALIASES.items():
        if want not in cols and alias in cols:
            cols[want] = cols.pop(alias)
    white = cols["racePctWhite"]
    other = cols["racepctblack"] + cols["racePctAsian"] + cols["racePctHisp"]
    a = (white / 5.0 < other).astype(np.int64)
    target = cols.pop("ViolentCrimesPerPop")
    y = (target < np.median(target)).astype(np.int64)
    return RawTable(cols, a, y, list(CRIME_KEEP), [], [], None,
                    ["columns with missing values dropped",
                     "a=1 iff racePctWhite/5 < racepctblack + racePctAsian + racePctHisp on the normalised columns",
                     "y=1 for violent crime rate below the median"])


def _parse_law(cfg: DataConfig) -> RawTable:
    (path,) = cfg.raw_paths("law")
    _require([path])
    head, rows = _read_csv(path)
    head = [h.lower() for h in head]
    check_columns("law", head)
    ix = {n: i for i, n in enumerate(head)}
    used = ["college", "lsat", "gpa", "race", "admit", "year", "gender", "resident"]
    rows = [r for r in rows if all(r[ix[c]] not in ("", "NA", "?") for c in used)]
    col = lambda n: np.array([r[ix[n]] for r in rows])  # noqa: E731
    cols = {"lsat": _as_float(col("lsat")), "gpa": _as_float(col("gpa")), "college": col("college"),
            "year": _as_float(col("year")), "gender": col("gender"), "resident": col("resident")}
    a = np.array([v.strip().lower() != "white" for v in col("race")], dtype=np.int64)
    y = _as_float(col("admit")).astype(np.int64)
    return RawTable(cols, a, y, ["lsat", "gpa", "college_rank"], [], ["college", "gender", "resident"], None,
                    ["a=1 for non-white", "y=1 for admitted",
                     "college replaced by its rank of decreasing admission rate on the training split"])


PARSERS = {"adult": _parse_adult, "compas": _parse_compas, "crime": _parse_crime, "law": _parse_law}


# --------------------------------------------------------------------------- preprocessing

def quantile_edges(values, n_bins: int) -> np.ndarray:
    """Interior bin edges at the train quantiles, merged until no bin is empty on ``values``."""
    values = np.asarray(values, dtype=np.float64)
    qs = np.unique(np.quantile(values, np.linspace(0, 1, n_bins + 1)[1:-1]))
    kept, lo = [], -np.inf
    for e in qs:
        if np.any((values >= lo) & (values < e)):
            kept.append(e)
            lo = e
    if kept and not np.any(values >= kept[-1]):
        kept.pop()
    return np.array(kept)


def discretise(values, edges) -> np.ndarray:
    """Bin k holds edges[k-1] <= v < edges[k]."""
    return np.searchsorted(np.asarray(edges), np.asarray(values, dtype=np.float64), side="right").astype(np.int64)


def bin_representative(codes, edges) -> np.ndarray:
    """A value inside each bin (interval midpoint, or one unit beyond an outer edge)."""
    edges = np.asarray(edges, dtype=np.float64)
    ext = np.r_[edges[0] - 1.0, edges, edges[-1] + 1.0] if len(edges) else np.array([-1.0, 1.0])
    codes = np.asarray(codes)
    return 0.5 * (ext[codes] + ext[codes + 1])


def _category_codes(col):
    cats = sorted(set(col.tolist()))
    lut = {c: i for i, c in enumerate(cats)}
    return np.array([lut[v] for v in col], dtype=np.int64), cats


def _college_rank(college, y, train_mask):
    """Colleges ordered by decreasing admission rate on the training rows (ties by name)."""
    names = sorted(set(college.tolist()))
    rate = {c: y[train_mask & (college == c)].mean() if np.any(train_mask & (college == c)) else 0.0 for c in names}
    order = sorted(names, key=lambda c: (-rate[c], c))
    lut = {c: float(i) for i, c in enumerate(order)}
    return np.array([lut[c] for c in college])


def _assemble(table: RawTable, name: str, cfg: DataConfig, variant: str, split_of_row: np.ndarray):
    train_mask = split_of_row == 0
    cols = dict(table.columns)
    if name == "law":
        cols["college_rank"] = _college_rank(cols["college"], table.y, train_mask)
    if variant == "preprocessed":
        names = table.keep
    else:
        names = [c for c in cols if c != "college_rank"]
        if name == "law":
            names = ["college_rank" if c == "college" else c for c in names]
    feats, kinds, cards, bins = [], [], [], {}
    categorical_out = name in ("adult", "compas") and variant == "preprocessed"
    for c in names:
        v = cols[c]
        if c in table.categorical or (categorical_out and c not in table.discretise):
            codes, cats = _category_codes(v.astype(str) if v.dtype.kind == "f" else v)
            feats.append(codes)
            kinds.append("categorical")
            cards.append(len(cats))
        elif categorical_out and c in table.discretise:
            edges = quantile_edges(v[train_mask], cfg.n_bins)
            bins[c] = edges.tolist()
            feats.append(discretise(v, edges))
            kinds.append("categorical")
            cards.append(len(edges) + 1)
        else:
            feats.append(np.asarray(v, dtype=np.float64))
            kinds.append("continuous")
            cards.append(0)
    if all(k == "categorical" for k in kinds):
        x = np.stack(feats, axis=1).astype(np.int64)
    else:
        x = np.stack([np.asarray(f, dtype=np.float64) for f in feats], axis=1)
    return x, names, kinds, cards, bins


def load_dataset(name: str, config: DataConfig | None = None, variant: str = "preprocessed"):
    """(train, val, test) TabularDatasets for one of :data:`DATASETS`.

    ``variant="original"`` keeps every usable raw feature and is meant for the
    preprocessing sanity check; the default is the reduced feature set the
    density models and encoders are built on.
    """
    cfg = config or DataConfig()
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if variant not in ("preprocessed", "original"):
        raise ValueError("variant must be 'preprocessed' or 'original'")
    if name == "synthetic":
        return synthetic_splits(cfg.synthetic_n, cfg.seed)
    table = PARSERS[name](cfg)
    n = len(table)
    split_of_row = np.zeros(n, dtype=np.int64)
    if table.test_rows is not None:
        split_of_row[table.test_rows] = 2
        trval = np.flatnonzero(~table.test_rows)
        n_val = math.ceil(cfg.val_fraction * len(trval))
        val = np.random.default_rng(cfg.seed).permutation(trval)[:n_val]
        split_of_row[val] = 1
    else:
        tr, val, te = split_indices(n, cfg.seed, cfg.test_fraction, cfg.val_fraction)
        split_of_row[val], split_of_row[te] = 1, 2
    x, names, kinds, cards, bins = _assemble(table, name, cfg, variant, split_of_row)
    out = []
    for s, tag in enumerate(("train", "val", "test")):
        idx = np.flatnonzero(split_of_row == s)
        out.append(TabularDataset(x[idx], table.a[idx], table.y[idx], tag, list(names), list(kinds), list(cards),
                                  dict(bins), name, idx))
    return tuple(out)


# --------------------------------------------------------------------------- cache

def save_cache(splits, directory) -> Path:
    """Write train/val/test CSVs (features, a, y, row_id) plus a schema.json sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ds in splits:
        header = list(ds.columns) + ["a", "y", "row_id"]
        fmt = ["%d" if k == "categorical" else "%.17g" for k in ds.kinds] + ["%d", "%d", "%d"]
        body = np.column_stack([ds.x.astype(np.float64), ds.a, ds.y, ds.row_ids])
        np.savetxt(directory / f"{ds.split}.csv", body, fmt=fmt, delimiter=",", header=",".join(header), comments="")
    schema = dict(splits[0].schema())
    schema["splits"] = {ds.split: len(ds) for ds in splits}
    schema["split_hash"] = split_hash(*[ds.row_ids for ds in splits])
    (directory / "schema.json").write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n")
    return directory


def load_cache(directory):
    directory = Path(directory)
    schema_path = directory / "schema.json"
    if not schema_path.exists():
        raise FileNotFoundError(f"dataset cache not found: {schema_path}")
    schema = json.loads(schema_path.read_text())
    out = []
    for tag in ("train", "val", "test"):
        path = directory / f"{tag}.csv"
        if not path.exists():
            raise FileNotFoundError(f"dataset cache not found: {path}")
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if header[:-3] != schema["columns"]:
            raise SchemaError(f"{path}: columns {header[:-3]} do not match schema {schema['columns']}")
        body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        d = len(schema["columns"])
        x = body[:, :d]
        if all(k == "categorical" for k in schema["kinds"]):
            x = x.astype(np.int64)
        out.append(TabularDataset(x, body[:, d], body[:, d + 1], tag, schema["columns"], schema["kinds"],
                                  schema["cardinalities"], schema["bins"], schema["name"],
                                  body[:, d + 2].astype(np.int64)))
    return tuple(out)


# --------------------------------------------------------------------------- preprocessing sanity check

def mlp_features(train: TabularDataset, *others):
    """One-hot categorical columns and train-standardised continuous columns."""
    def enc(ds):
        blocks = []
        for j, kind in enumerate(ds.kinds):
            col = ds.x[:, j]
            if kind == "categorical":
                blocks.append(np.eye(ds.cardinalities[j])[col.astype(int)])
            else:
                ref = train.x[:, j].astype(np.float64)
                sd = ref.std() if ref.std() > 0 else 1.0
                blocks.append(((col.astype(np.float64) - ref.mean()) / sd)[:, None])
        return np.hstack(blocks)

    return [enc(ds) for ds in (train, *others)]


def preprocessing_sanity(name: str, config: DataConfig | None = None, seeds=(0, 1, 2, 3, 4), hidden=(50, 50),
                         epochs: int = 20) -> dict:
    """Test accuracy of the same MLP on the original and the preprocessed features."""
    from .downstream import fit_classifier

    report = {"dataset": name, "hidden": list(hidden), "epochs": epochs, "seeds": list(seeds)}
    for variant in ("original", "preprocessed"):
        train, _, test = load_dataset(name, config, variant)
        Xtr, Xte = mlp_features(train, test)
        accs = []
        for s in seeds:
            clf = fit_classifier(Xtr, train.y, hidden, np.random.default_rng(s), epochs=epochs, balanced=False)
            accs.append(float(np.mean(clf.predict(Xte) == test.y)))
        report[variant] = {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "runs": accs,
                           "n_features": Xtr.shape[1]}
    report["gap"] = report["original"]["mean"] - report["preprocessed"]["mean"]
    return report
