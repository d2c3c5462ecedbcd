import csv
import json

import numpy as np
import pytest

from fnf.cli import EXIT_MISSING, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from fnf.data import TabularDataset, save_cache
from fnf.discrete import DiscreteMatching, discrete_statistical_distance
from fnf.train import FNFModel

TINY = ["--epochs", "2", "--steps-per-epoch", "3", "--batch-size", "32", "--n-blocks", "2",
        "--flow-hidden", "8", "8", "--clf-hidden", "8"]


def run(*argv):
    return main([str(a) for a in argv], _exit=False)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--n", 300, "--seed", 0, "--out", root / "data") == EXIT_OK
    assert run("fit-density", "--cache", root / "data", "--density", "exact", "--out", root / "dens") == EXIT_OK
    assert run("train", "--cache", root / "data", "--densities", root / "dens", "--gamma", 0.5, *TINY,
               "--out", root / "train") == EXIT_OK
    return root


def test_synth_and_density_outputs(pipeline):
    manifest = json.loads((pipeline / "dens" / "manifest.json").read_text())
    assert manifest["command"] == "fit-density" and set(manifest["outputs"]) >= {"density0.json", "density1.json"}
    assert all(len(h) == 64 for h in manifest["inputs"].values())
    assert json.loads((pipeline / "dens" / "density0.json").read_text())["manifest"] == "manifest.json"


def test_train_writes_checkpoint_trace_and_manifest(pipeline):
    model = FNFModel.from_json(json.loads((pipeline / "train" / "model.json").read_text()))
    assert model.config.gamma == 0.5
    rows = list(csv.DictReader(open(pipeline / "train" / "trace.csv")))
    assert len(rows) == 2 and "val_delta" in rows[0]


def test_rerun_is_byte_identical(pipeline, tmp_path):
    assert run("rerun", pipeline / "train" / "manifest.json", "--out", tmp_path / "again") == EXIT_OK
    for name in ("model.json", "trace.csv", "tradeoff.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (pipeline / "train" / name).read_bytes()


def test_gmm_fit_rerun_is_byte_identical(pipeline, tmp_path):
    args = ["fit-density", "--cache", pipeline / "data", "--density", "gmm", "--gmm-k0", 2, "--gmm-k1", 2]
    assert run(*args, "--out", tmp_path / "a") == EXIT_OK
    assert run(*args, "--out", tmp_path / "b") == EXIT_OK
    for g in (0, 1):
        assert (tmp_path / "a" / f"density{g}.json").read_bytes() == (tmp_path / "b" / f"density{g}.json").read_bytes()


def test_manifest_is_never_overwritten(pipeline):
    assert run("fit-density", "--cache", pipeline / "data", "--density", "exact", "--out", pipeline / "dens") == EXIT_USAGE


def test_gamma_sweep_layout(pipeline, tmp_path):
    code = run("train", "--cache", pipeline / "data", "--densities", pipeline / "dens", "--gammas", "0,1",
               "--seeds", 2, *TINY, "--out", tmp_path)
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "tradeoff.csv")))
    assert [(r["gamma"], r["seed"]) for r in rows] == [("0.0", "0"), ("0.0", "1"), ("1.0", "0"), ("1.0", "1")]
    assert all((tmp_path / r["checkpoint"]).exists() for r in rows)


def test_invalid_gamma_is_usage_error(pipeline, tmp_path):
    assert run("train", "--cache", pipeline / "data", "--densities", pipeline / "dens", "--gamma", 1.5,
               "--out", tmp_path) == EXIT_USAGE
    assert run("frobnicate") == EXIT_USAGE


def test_missing_cache_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert run("fit-density", "--cache", missing, "--out", tmp_path / "o") == EXIT_MISSING
    assert str(missing) in capsys.readouterr().err


def test_certify_attack_eval_recourse(pipeline, tmp_path):
    ckpt, dens, data = pipeline / "train" / "model.json", pipeline / "dens", pipeline / "data"
    assert run("certify", "--checkpoint", ckpt, "--densities", dens, "--cache", data, "--n", 2000,
               "--delta", 0.05, "--out", tmp_path / "cert") == EXIT_OK
    cert = json.loads((tmp_path / "cert" / "certificate.json").read_text())
    assert cert["epsilon"] == pytest.approx(np.sqrt(-2 * np.log((1 - np.sqrt(0.95)) / 2) / 2000))
    assert run("attack", "--checkpoint", ckpt, "--cache", data, "--arch", "1x8", "--seeds", 1, "--epochs", 2,
               "--certificate", tmp_path / "cert" / "certificate.json", "--out", tmp_path / "atk") == EXIT_OK
    atk = json.loads((tmp_path / "atk" / "attack.json").read_text())
    assert atk["bound"] == cert["max_adv_acc"] and len(atk["runs"]) == 1
    assert run("eval", "--checkpoint", ckpt, "--cache", data, "--out", tmp_path / "ev") == EXIT_OK
    assert "demographic_parity" in json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert run("recourse", "--checkpoint", ckpt, "--cache", data, "--index", 0, "--out", tmp_path / "rc") == EXIT_OK
    assert "found" in json.loads((tmp_path / "rc" / "recourse.json").read_text())


def test_certify_checkpoint_needs_densities(pipeline, tmp_path):
    assert run("certify", "--checkpoint", pipeline / "train" / "model.json", "--out", tmp_path) == EXIT_USAGE


def test_numeric_failure_exit_code(pipeline, tmp_path):
    obj = json.loads((pipeline / "train" / "model.json").read_text())
    for f in ("f0", "f1"):
        vals = obj["pair"][f]["params"]["values"]
        obj["pair"][f]["params"]["values"] = [1e300] * len(vals)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(obj))
    assert run("certify", "--checkpoint", bad, "--densities", pipeline / "dens", "--n", 100,
               "--out", tmp_path / "c") == EXIT_NUMERIC


def test_match_discrete_reports_exact_distance(tmp_path):
    rng = np.random.default_rng(0)
    splits = []
    for tag, n in (("train", 600), ("val", 100), ("test", 100)):
        a = rng.integers(0, 2, n)
        x = np.column_stack([rng.integers(0, 3, n), (rng.random(n) < 0.3 + 0.4 * a).astype(int), rng.integers(0, 2, n)])
        y = (x[:, 0] + x[:, 1] >= 2).astype(int)
        splits.append(TabularDataset(x, a, y, tag, ["c0", "c1", "c2"], name="toy"))
    save_cache(splits, tmp_path / "data")
    assert run("match-discrete", "--cache", tmp_path / "data", "--gamma", 0.5, "--epochs", 2,
               "--out", tmp_path / "m") == EXIT_OK
    report = json.loads((tmp_path / "m" / "report.json").read_text())
    match = DiscreteMatching.from_json(json.loads((tmp_path / "m" / "matching.json").read_text())["matching"])
    assert report["domain_size"] == 12 and report["exhaustive_domain"]
    assert report["statistical_distance"] == discrete_statistical_distance(match)
    # the rank-sorted matching attains half the l1 gap between the sorted probability vectors
    sorted_gap = 0.5 * np.abs(np.sort(match.p0) - np.sort(match.p1)).sum()
    assert report["statistical_distance_gamma1"] == pytest.approx(sorted_gap, abs=1e-12)
    assert run("certify", "--matching", tmp_path / "m" / "matching.json", "--n", 5000, "--out", tmp_path / "c") == EXIT_OK
