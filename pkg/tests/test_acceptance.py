"""Acceptance criteria, one test each, run at the stated tolerances.

Every test records a single ``[n] PASS|FAIL|BLOCKED ...`` line; the lines are
printed in the terminal summary and written to ``acceptance_summary.txt``.
Criteria that need raw Crime or Law files are skipped as BLOCKED when the
files are absent. ``FNF_FULL_ACCEPTANCE=1`` runs the 100-seed synthetic
FNF histogram (hours on one core) instead of the 5 live seeds.
"""
import itertools
import os
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from fnf.data import DataConfig, make_synthetic, synthetic_densities
from fnf.density import fit_categorical, fit_gmm
from fnf.discrete import brute_force_min_tv, discrete_statistical_distance, optimal_matching, pushforward, \
    total_variation
from fnf.downstream import Classifier, bce_with_logits
from fnf.experiments import GAMMA_GRIDS, SweepSpec, bound_violations, coverage, gamma_sweep, \
    nonincreasing_within_ci, recovery_histogram, sanity_row, summarise, synthetic_adversarial_run, \
    synthetic_fnf_run
from fnf.flow import FlowEncoder, latent_log_density_t
from fnf.numerics import ParamVector, grad_check
from fnf.train import TrainConfig, init_model, kl_surrogate_losses_t, make_loss_fn

pytestmark = pytest.mark.slow
FULL = os.environ.get("FNF_FULL_ACCEPTANCE") == "1"
DATA = DataConfig()


def report(n: int, ok: bool | None, detail: str):
    status = "BLOCKED" if ok is None else ("PASS" if ok else "FAIL")
    line = f"[{n}] {status} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def missing(*datasets):
    return [str(p) for d in datasets for p in DATA.raw_paths(d) if not p.exists()]


# ---------------------------------------------------------------------------- 1: synthetic end to end


def test_1_synthetic_end_to_end():
    t0 = time.time()
    runs = [synthetic_fnf_run(s) for s in range(5)]
    five_seed_seconds = time.time() - t0
    attack = [r["attack_mean"] for r in runs]
    acc = [r["accuracy"] for r in runs]
    attack_ok = all(abs(a - 0.5) <= 0.02 for a in attack)
    acc_ok = min(acc) >= 0.98

    fnf_rec = [r["attack_max"] for r in (runs + [synthetic_fnf_run(s) for s in range(5, 100)] if FULL else runs)]
    adv_rec = [r["recovery"] for r in (synthetic_adversarial_run(s) for s in range(100))]
    near_half = float(np.mean([abs(v - 0.5) <= 0.025 for v in fnf_rec]))
    adv_high = float(np.mean([v > 0.55 for v in adv_rec]))
    shape_ok = near_half >= 0.9 and adv_high >= 0.5
    runtime_ok = five_seed_seconds <= 600
    per_seed = five_seed_seconds / 5
    hist = f"fnf hist {recovery_histogram(fnf_rec).tolist()} adv hist {recovery_histogram(adv_rec).tolist()}"
    detail = (f"synthetic: attack(2x50, mean of 5) {min(attack):.3f}..{max(attack):.3f} [0.48, 0.52], "
              f"accuracy min {min(acc):.4f} >= 0.98, FNF seeds within 0.5+-0.025: {near_half:.2f} of "
              f"{len(fnf_rec)}{'' if FULL else ' (live seeds only; FNF_FULL_ACCEPTANCE=1 for 100)'}, "
              f"baseline seeds > 0.55: {adv_high:.2f} of 100, 5-seed wall {five_seed_seconds:.0f}s <= 600s "
              f"(100 seeds on this machine ~{100 * per_seed / 60:.0f} min); {hist}")
    report(1, attack_ok and acc_ok and shape_ok and runtime_ok, detail)
    assert attack_ok and acc_ok, detail
    assert shape_ok, detail
    assert runtime_ok, detail


# ---------------------------------------------------------------------------- 2, 3, 7: Crime / Law sweeps

CRIME_REFERENCE = {0.0: (1.00, 0.85), 0.02: (0.70, 0.85), 0.1: (0.53, 0.83), 0.9: (0.23, 0.69)}
_SWEEPS: dict = {}


def sweep(dataset):
    if dataset not in _SWEEPS:
        t0 = time.time()
        rows = gamma_sweep(SweepSpec(dataset, GAMMA_GRIDS[dataset], data=DATA))
        _SWEEPS[dataset] = (rows, time.time() - t0)
    return _SWEEPS[dataset]


def test_2_crime_gamma_sweep():
    gone = missing("crime")
    if gone:
        report(2, None, f"crime sweep: raw data missing ({', '.join(gone)})")
        pytest.skip("crime raw data missing")
    rows, seconds = sweep("crime")
    d = {s["gamma"]: s["mean"] for s in summarise(rows, "delta_hat")}
    a = {s["gamma"]: s["mean"] for s in summarise(rows, "accuracy")}
    errs = {g: (abs(d[g] - rd), abs(a[g] - ra)) for g, (rd, ra) in CRIME_REFERENCE.items()}
    ok = all(max(e) <= 0.07 for e in errs.values()) and seconds <= 900
    detail = "crime sweep: " + ", ".join(f"g={g}: delta {d[g]:.2f}/{CRIME_REFERENCE[g][0]:.2f} "
                                         f"acc {a[g]:.2f}/{CRIME_REFERENCE[g][1]:.2f}" for g in CRIME_REFERENCE)
    report(2, ok, f"{detail}; tolerance 0.07; wall {seconds:.0f}s <= 900s")
    assert ok


def test_3_certified_dominance():
    gone = missing("crime")
    if gone:
        report(3, None, f"certified dominance: raw data missing ({', '.join(gone)})")
        pytest.skip("crime raw data missing")
    rows, _ = sweep("crime")
    bad = bound_violations(rows)
    n_checks = sum(k.startswith("attack_") for r in rows for k in r)
    report(3, not bad, f"certified dominance: {len(bad)} violations of (1 + delta_hat + eps)/2 over {n_checks} "
                       f"attacks (1x8, 2x50, 3x200; n=1e5, delta=0.05)")
    assert not bad


def test_7_fairness_metric_trend():
    gone = missing("crime", "law")
    if gone:
        report(7, None, f"fairness trend: raw data missing ({', '.join(gone)})")
        pytest.skip("crime or law raw data missing")
    failures = []
    for ds in ("crime", "law"):
        rows, _ = sweep(ds)
        for key in ("demographic_parity", "equalized_odds", "equal_opportunity"):
            if not nonincreasing_within_ci(summarise(rows, key))[0]:
                failures.append(f"{ds}/{key}")
    report(7, not failures, f"fairness trend on crime and law: non-monotone beyond 95% CI: {failures or 'none'}")
    assert not failures


# ---------------------------------------------------------------------------- 4: sorted matching oracle


def test_4_sorted_matching_equals_exhaustive_minimum():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 8))
        p0, p1 = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(m))
        best, _ = brute_force_min_tv(p0, p1)
        worst = max(worst, abs(discrete_statistical_distance(optimal_matching(p0, p1)) - best))
    # swapping a pair that violates the sorted order never increases the distance
    swaps = increases = 0
    while swaps < 1000:
        m = int(rng.integers(2, 8))
        p0, p1, perm = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(m)), rng.permutation(m)
        source = np.argsort(perm)
        viol = [(z, zp) for z, zp in itertools.combinations(range(m), 2)
                if (p0[z] - p0[zp]) * (p1[source[z]] - p1[source[zp]]) < 0]
        if not viol:
            continue
        z, zp = viol[rng.integers(len(viol))]
        y, yp = source[z], source[zp]
        swapped = perm.copy()
        swapped[y], swapped[yp] = zp, z
        increases += total_variation(p0, pushforward(p1, swapped)) > total_variation(p0, pushforward(p1, perm)) + 1e-15
        swaps += 1
    ok = worst <= 1e-15 and increases == 0
    report(4, ok, f"sorted matching vs all m! bijections (100 instances, m<=7): max |diff| {worst:.1e}; "
                  f"swap property: {increases} increases in {swaps} pairs")
    assert ok


# ---------------------------------------------------------------------------- 5: Hoeffding coverage


def test_5_hoeffding_coverage():
    res = [coverage(d, n=1000, reps=1000, seed=7) for d in (0.05, 0.25)]
    ok = all(r["coverage"] >= 1 - r["delta"] for r in res)
    report(5, ok, "coverage on N(-1,1) vs N(1,1): " + ", ".join(
        f"delta={r['delta']}: {r['coverage']:.3f} >= {1 - r['delta']:.2f} (eps {r['epsilon']:.4f})" for r in res))
    assert ok


# ---------------------------------------------------------------------------- 6: numerical hygiene


def _loss_gradient_errors():
    rng = np.random.default_rng(0)
    dens = synthetic_densities()
    ds = make_synthetic(200, 0)
    xs = [torch.as_tensor(d.sample(16, rng)) for d in dens]
    xc = [torch.as_tensor(ds.x[ds.a == g][:16]) for g in (0, 1)]
    yc = [torch.as_tensor(ds.y[ds.a == g][:16].astype(float)) for g in (0, 1)]
    model = init_model(TrainConfig(n_blocks=4, flow_hidden=(6, 6), clf_hidden=(6,)), 2, ds.x)
    model = model.with_joint(model.joint_params().values + 0.1 * rng.standard_normal(len(model.joint_params())))
    errs = {mode: grad_check(make_loss_fn(model, dens, xs[0], xs[1], xc, yc, 0.4, mode), model.joint_params())
            for mode in ("convex", "chebyshev")}
    pair = model.pair
    n0 = len(pair.f0.params)
    errs["kl_surrogate"] = grad_check(
        lambda th: sum(kl_surrogate_losses_t(pair, th[:n0], th[n0:], dens, xs[0], xs[1])),
        ParamVector(np.concatenate([pair.f0.params.values, pair.f1.params.values])))
    errs["latent_log_density"] = grad_check(lambda th: latent_log_density_t(pair.f0, th, dens[0], xs[1]).mean(),
                                            pair.f0.params)
    clf = Classifier.create(2, (8,), rng)
    errs["classifier_bce"] = grad_check(lambda th: bce_with_logits(clf.logits_t(th, xc[0]), yc[0]), clf.params)
    errs["gmm_log_density"] = grad_check(lambda t: dens[0].log_prob_torch(t.reshape(1, 2)).sum(),
                                         ParamVector(np.array([0.3, -1.2])))
    return errs


def test_6_numerical_hygiene():
    grads = _loss_gradient_errors()
    rng = np.random.default_rng(1)
    trip = 0.0
    for seed in range(5):
        enc = FlowEncoder.create(3, n_blocks=4, rng=np.random.default_rng(seed), shift=rng.normal(size=3),
                                 scale=rng.uniform(0.5, 2, size=3))
        enc = enc.with_params(rng.normal(0, 0.3, len(enc.params)))
        x = rng.normal(size=(500, 3)) * 2
        trip = max(trip, float(np.abs(enc.inverse(enc.forward(x)[0])[0] - x).max()))
    em_drop = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        data = np.vstack([r.normal(size=(100, 2)) * r.uniform(0.3, 2) + r.normal(0, 4, size=2) for _ in range(3)])
        trace = fit_gmm(data, int(r.integers(1, 5)), r, restarts=1).loglik_trace
        em_drop = max(em_drop, float(-np.diff(trace).min()) if len(trace) > 1 else 0.0)
    mass = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        card = tuple(int(c) for c in r.integers(1, 5, size=r.integers(1, 5)))
        data = r.integers(0, card, size=(50, len(card)))
        m = fit_categorical(data, alpha=float(r.uniform(0.1, 2)), cardinalities=card)
        dom = np.array(list(itertools.product(*map(range, card))))
        mass = max(mass, abs(float(np.exp(m.log_prob(dom)).sum()) - 1.0))
    ok = max(grads.values()) < 1e-4 and trip < 1e-6 and em_drop <= 1e-9 and mass <= 1e-9
    report(6, ok, "numerical hygiene: grad_check " + ", ".join(f"{k} {v:.1e}" for k, v in grads.items())
           + f" (< 1e-4); round trip {trip:.1e} (< 1e-6); EM max drop {em_drop:.1e} (<= 1e-9); "
             f"categorical mass error {mass:.1e} (<= 1e-9)")
    assert ok


# ---------------------------------------------------------------------------- 8: preprocessing sanity


def test_8_preprocessing_sanity():
    parts, ok, blocked = [], True, []
    for name in ("adult", "compas", "crime", "law"):
        if missing(name):
            blocked.append(name)
            continue
        r = sanity_row(name, DATA)
        good = (r["gap"] <= 2.0 and abs(r["original"] - r["reference_original"]) <= 1.0
                and abs(r["preprocessed"] - r["reference_preprocessed"]) <= 1.0)
        ok &= good
        parts.append(f"{name} {r['original']:.1f}/{r['preprocessed']:.1f} gap {r['gap']:.1f} "
                     f"(table {r['reference_original']}/{r['reference_preprocessed']}) {'ok' if good else 'off'}")
    tail = f"; blocked (raw data missing): {', '.join(blocked)}" if blocked else ""
    status = ok if not blocked or not ok else None
    report(8, status, "preprocessing sanity original/preprocessed: " + "; ".join(parts) + tail)
    assert ok, parts
    if blocked:
        pytest.skip(f"raw data missing for {', '.join(blocked)}")
