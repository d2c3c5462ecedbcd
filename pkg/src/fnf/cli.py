"""``fnf`` command line: prepare data, fit densities, train, certify, attack, evaluate.

Every command writes into its own ``--out`` directory together with a
``manifest.json`` recording argv, the full configuration, the seed, the code
version, SHA-256 hashes of inputs, the output files and the wall time. JSON
outputs carry a ``"manifest"`` key naming that file. A manifest is never
overwritten: a second run into the same directory is a usage error, and
``fnf rerun MANIFEST --out DIR`` replays a run into a fresh directory.

Exit codes: 0 success, 2 usage, 3 missing input, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .certify import DiscreteAdversary, FlowAdversary, attack_mlp, certify, parse_arch
from .data import DATASETS, DataConfig, TabularDataset, load_cache, load_dataset, mlp_features, save_cache, \
    synthetic_densities, synthetic_splits
from .density import DensityModel, fit_categorical, fit_gmm
from .discrete import DiscreteMatching, build_domain, discrete_statistical_distance, domain_probabilities, \
    label_split_matching
from .downstream import eval_metrics, fit_classifier, recourse
from .numerics import NumericalError, Rng
from .train import FNFModel, TrainConfig, train_fnf_restarts

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- output helpers


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, args, out: Path):
        self.args, self.out = args, Path(out)
        self.inputs: dict = {}
        self.outputs: list = []
        self.t0 = time.time()
        if (self.out / MANIFEST).exists():
            raise UsageError(f"{self.out / MANIFEST} already exists; manifests are immutable, pick a new --out")
        self.out.mkdir(parents=True, exist_ok=True)

    def use(self, *paths):
        for p in paths:
            p = Path(p)
            if not p.exists():
                raise FileNotFoundError(f"missing input: {p}")
            self.inputs[str(p)] = sha256(p)

    def write_json(self, name, obj):
        self._write(name, _dumps({**obj, "manifest": MANIFEST}))

    def write_text(self, name, text):
        self._write(name, text)

    def write_csv(self, name, rows, columns):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})
        self._write(name, buf.getvalue())

    def _write(self, name, text):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.outputs.append(name)

    def finish(self, config: dict, seed):
        manifest = {
            "command": self.args.command,
            "argv": self.args.argv,
            "config": config,
            "seed": seed,
            "code_version": __version__,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "wall_time_s": round(time.time() - self.t0, 3),
        }
        path = self.out / MANIFEST
        path.write_text(_dumps(manifest))
        os.chmod(path, 0o444)
        return manifest


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    return json.loads(path.read_text())


def _data_config(args) -> DataConfig:
    root = args.data_root if getattr(args, "data_root", None) else None
    return DataConfig(root=root, seed=args.seed) if root else DataConfig(seed=args.seed)


def _cache_dir(args) -> Path:
    if args.cache:
        return Path(args.cache)
    return _data_config(args).root_path / "cache" / args.dataset


def _load_cache(run: Run, directory) -> tuple:
    directory = Path(directory)
    splits = load_cache(directory)
    run.use(directory / "schema.json", *[directory / f"{s}.csv" for s in ("train", "val", "test")])
    return splits


def _load_densities(run: Run, directory) -> tuple:
    directory = Path(directory)
    out = []
    for g in (0, 1):
        p = directory / f"density{g}.json"
        run.use(p)
        obj = _read_json(p)
        out.append(DensityModel.from_json(obj["density"]))
    return tuple(out)


def _load_model(run: Run, path) -> FNFModel:
    run.use(path)
    return FNFModel.from_json(_read_json(path))


# --------------------------------------------------------------------------- commands


def cmd_prepare(args):
    run = Run(args, _cache_dir(args) if not args.out else args.out)
    cfg = _data_config(args)
    splits = load_dataset(args.dataset, cfg, args.variant)
    for p in cfg.raw_paths(args.dataset):
        run.use(p)
    save_cache(splits, run.out)
    run.outputs += ["schema.json", "train.csv", "val.csv", "test.csv"]
    stats = {ds.split: ds.stats() for ds in splits}
    run.write_json("stats.json", {"dataset": args.dataset, "variant": args.variant, "splits": stats})
    print(f"{args.dataset}: " + ", ".join(f"{k}={v['size']}" for k, v in stats.items()))
    return run.finish({"dataset": args.dataset, "variant": args.variant, "data_root": str(cfg.root_path)}, args.seed)


def cmd_synth(args):
    run = Run(args, args.out)
    splits = synthetic_splits(args.n, args.seed)
    save_cache(splits, run.out)
    run.outputs += ["schema.json", "train.csv", "val.csv", "test.csv"]
    print(f"synthetic: n={args.n} per group, seed={args.seed}")
    return run.finish({"n": args.n}, args.seed)


def cmd_fit_density(args):
    run = Run(args, args.out)
    train = _load_cache(run, args.cache)[0]
    rng = Rng(args.seed).stream("init")
    kind = args.density or ("categorical" if train.categorical else "gmm")
    report = {"kind": kind, "groups": {}}
    for g, k in ((0, args.gmm_k0), (1, args.gmm_k1)):
        xg = train.group(g)
        if kind == "exact":
            if train.name != "synthetic":
                raise UsageError("--density exact is only defined for the synthetic dataset")
            model = synthetic_densities()[g]
        elif kind == "gmm":
            model = fit_gmm(xg.astype(np.float64), k, rng, group=g)
        else:
            if not train.categorical:
                raise UsageError("categorical densities need a fully categorical dataset")
            model = fit_categorical(xg, args.alpha, cardinalities=train.cardinalities, group=g)
        mean_ll = float(np.mean(model.log_prob(xg)))
        report["groups"][str(g)] = {"n": int(len(xg)), "mean_train_loglik": mean_ll, "notes": model.notes}
        run.write_json(f"density{g}.json", {"format_version": 1, "kind": "density", "density": model.to_json()})
        print(f"group {g}: {kind}, n={len(xg)}, mean log-likelihood {mean_ll:.4f}")
    run.write_json("fit_report.json", report)
    return run.finish({"density": kind, "gmm_k0": args.gmm_k0, "gmm_k1": args.gmm_k1, "alpha": args.alpha},
                      args.seed)


def _train_one(job):
    cfg_json, densities_json, cache, restarts, probe_epochs = job
    torch.set_num_threads(1)
    cfg = TrainConfig.from_json(cfg_json)
    dens = tuple(DensityModel.from_json(d) for d in densities_json)
    train, val, _ = load_cache(cache)
    res, scores = train_fnf_restarts(cfg, dens, train, val, restarts, probe_epochs)
    return res.final.to_json(), res.trace.to_csv(), scores


def cmd_train(args):
    gammas = [args.gamma] if args.gammas is None else [float(g) for g in args.gammas.split(",")]
    seeds = list(range(args.seed, args.seed + args.seeds))
    base = dict(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, n_blocks=args.n_blocks,
                flow_hidden=tuple(args.flow_hidden), clf_hidden=tuple(args.clf_hidden),
                scalarization=args.scalarization, cosine_decay=args.cosine_decay,
                steps_per_epoch=args.steps_per_epoch)
    configs = [TrainConfig(gamma=g, seed=s, **base) for g in gammas for s in seeds]
    run = Run(args, args.out)
    dens = _load_densities(run, args.densities)
    if any(d.kind != "gmm" for d in dens):
        raise UsageError("flow training needs mixture densities; use match-discrete for categorical data")
    _load_cache(run, args.cache)
    jobs = [(c.to_json(), [d.to_json() for d in dens], str(args.cache), args.restarts, args.probe_epochs)
            for c in configs]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    rows = []
    for cfg, (model_json, trace_csv, scores) in zip(configs, results):
        tag = f"gamma{cfg.gamma:g}_seed{cfg.seed}" if len(configs) > 1 else ""
        prefix = f"{tag}/" if tag else ""
        run.write_json(prefix + "model.json", model_json)
        run.write_text(prefix + "trace.csv", trace_csv)
        last = list(csv.DictReader(io.StringIO(trace_csv)))[-1]
        rows.append({"gamma": cfg.gamma, "seed": cfg.seed, "checkpoint": prefix + "model.json",
                     "val_delta": float(last["val_delta"]), "val_accuracy": float(last["val_accuracy"]),
                     "val_joint": float(last["val_joint"]), "restart_val_joints": " ".join(map(repr, scores))})
        print(f"gamma={cfg.gamma:g} seed={cfg.seed}: val delta {rows[-1]['val_delta']:.4f}, "
              f"val balanced accuracy {rows[-1]['val_accuracy']:.4f}")
    run.write_csv("tradeoff.csv", rows, list(rows[0]))
    return run.finish({"train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in base.items()},
                       "gammas": gammas, "seeds": seeds, "restarts": args.restarts,
                       "probe_epochs": args.probe_epochs}, args.seed)


def _adversary(run: Run, args):
    if args.matching:
        run.use(args.matching)
        match = DiscreteMatching.from_json(_read_json(args.matching)["matching"])
        return DiscreteAdversary(match), None, None
    if not args.densities:
        raise UsageError("--checkpoint needs --densities")
    model = _load_model(run, args.checkpoint)
    dens = _load_densities(run, args.densities)
    return FlowAdversary(model.pair, dens), dens, model


def cmd_certify(args):
    run = Run(args, args.out)
    adv, dens, model = _adversary(run, args)
    labelled = None
    if model is not None and args.cache:
        test = _load_cache(run, args.cache)[2]
        labelled = (model.encode(test.x, test.a), test.a, test.y)
    rep = certify(adv, dens, args.n, args.delta, Rng(args.seed).stream("eval"), args.eps_target, labelled)
    run.write_json("certificate.json", rep.to_json())
    run.write_text("certificate.txt", rep.table() + "\n")
    print(rep.table())
    return run.finish({"n": args.n, "delta": args.delta, "eps_target": args.eps_target}, args.seed)


def cmd_attack(args):
    run = Run(args, args.out)
    model = _load_model(run, args.checkpoint)
    train, _, test = _load_cache(run, args.cache)
    ztr, zte = model.encode(train.x, train.a), model.encode(test.x, test.a)
    bound = None
    if args.certificate:
        run.use(args.certificate)
        bound = _read_json(args.certificate)["max_adv_acc"]
    rows = []
    for arch in args.arch:
        res = attack_mlp(ztr, train.a, zte, test.a, parse_arch(arch), seeds=tuple(range(args.seeds)),
                         epochs=args.epochs)
        for s, acc in enumerate(res.accuracies):
            rows.append({"arch": res.arch, "seed": s, "accuracy": acc})
        line = f"attack {res.arch}: best balanced accuracy {res.best:.4f}"
        if bound is not None:
            line += f" (certified bound {bound:.4f}, {'ok' if res.best <= bound else 'VIOLATION'})"
        print(line)
    best = max(r["accuracy"] for r in rows)
    report = {"best": best, "bound": bound, "violation": None if bound is None else bool(best > bound),
              "runs": rows}
    run.write_json("attack.json", report)
    run.write_csv("attack.csv", rows, ["arch", "seed", "accuracy"])
    return run.finish({"arch": args.arch, "seeds": args.seeds, "epochs": args.epochs}, args.seed)


def cmd_eval(args):
    run = Run(args, args.out)
    model = _load_model(run, args.checkpoint)
    _, _, test = _load_cache(run, args.cache)
    m = eval_metrics(model.classifier, model.encode(test.x, test.a), test.a, test.y, args.threshold)
    row = m.as_row()
    run.write_json("metrics.json", {**row, "equalized_odds_per_y": {str(k): v for k, v in m.equalized_odds_per_y.items()}})
    run.write_csv("metrics.csv", [row], list(row))
    print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return run.finish({"threshold": args.threshold}, args.seed)


def cmd_match_discrete(args):
    run = Run(args, args.out)
    train = _load_cache(run, args.cache)[0]
    if not train.categorical:
        raise UsageError("match-discrete needs a fully categorical dataset")
    models = [fit_categorical(train.group(g), args.alpha, cardinalities=train.cardinalities, group=g) for g in (0, 1)]
    domain = build_domain(train.cardinalities, train.x)
    probs = [domain_probabilities(m, domain) for m in models]
    # label of each domain point from an MLP fitted on the training rows
    feats, dom_feats = mlp_features(train, TabularDataset(domain.array(), np.zeros(len(domain)), np.zeros(len(domain)),
                                                          "domain", train.columns, train.kinds, train.cardinalities))
    h = fit_classifier(feats, train.y, (50, 50), Rng(args.seed).stream("init"), epochs=args.epochs)
    match = label_split_matching(probs[0][0], probs[1][0], h.predict(dom_feats), domain, args.gamma)
    dist = discrete_statistical_distance(match)
    report = {"gamma": args.gamma, "domain_size": len(domain), "exhaustive_domain": domain.exhaustive,
              "missing_mass": [probs[0][1], probs[1][1]], "statistical_distance": dist,
              "statistical_distance_gamma1": discrete_statistical_distance(match.with_gamma(1.0)),
              "notes": match.notes}
    run.write_json("matching.json", {"format_version": 1, "kind": "matching", "matching": match.to_json()})
    run.write_json("report.json", report)
    print(f"domain of {len(domain)} points, exact statistical distance {dist:.6f} at gamma={args.gamma:g}")
    return run.finish({"gamma": args.gamma, "alpha": args.alpha, "epochs": args.epochs}, args.seed)


def cmd_recourse(args):
    run = Run(args, args.out)
    model = _load_model(run, args.checkpoint)
    train, _, test = _load_cache(run, args.cache)
    if not 0 <= args.index < len(test):
        raise UsageError(f"--index must lie in [0, {len(test)})")
    x, a = test.x[args.index].astype(np.float64), int(test.a[args.index])
    latents = model.encode(train.x[train.a == a], train.a[train.a == a])
    immutable = [train.columns.index(c) for c in args.immutable]
    res = recourse(model.pair, model.classifier, x, a, latents, immutable=immutable)
    run.write_json("recourse.json", {"index": args.index, "a": a, "columns": train.columns, **res.to_json()})
    print("recourse found" if res.found else f"no recourse: {res.reason}")
    return run.finish({"index": args.index, "immutable": args.immutable}, args.seed)


def cmd_rerun(args):
    manifest = _read_json(args.manifest)
    argv = list(manifest["argv"])
    if "--out" in argv:
        argv[argv.index("--out") + 1] = args.out
    else:
        argv += ["--out", args.out]
    return main(argv, _exit=False)


# --------------------------------------------------------------------------- parser


def _gamma(text):
    g = float(text)
    if not 0.0 <= g <= 1.0:
        raise argparse.ArgumentTypeError(f"gamma must lie in [0, 1], got {g}")
    return g


def _gammas(text):
    for t in text.split(","):
        _gamma(t)
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fnf", description="Fair representations with paired flow encoders.")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_, out=True):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=0)
        if out:
            sp.add_argument("--out", required=True, help="output directory (receives manifest.json)")
        return sp

    sp = cmd("prepare", cmd_prepare, "parse raw data into a split cache", out=False)
    sp.add_argument("--dataset", choices=[d for d in DATASETS if d != "synthetic"], required=True)
    sp.add_argument("--data-root", help="raw data root (default: $FNF_DATA_ROOT or ./data)")
    sp.add_argument("--variant", choices=["preprocessed", "original"], default="preprocessed")
    sp.add_argument("--out", help="cache directory (default: <data root>/cache/<dataset>)")
    sp.add_argument("--cache", help=argparse.SUPPRESS)

    sp = cmd("synth", cmd_synth, "write the two-mixture synthetic dataset as a cache")
    sp.add_argument("--n", type=int, default=4000, help="points per group")

    sp = cmd("fit-density", cmd_fit_density, "fit the group densities p0, p1")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--density", choices=["gmm", "categorical", "exact"])
    sp.add_argument("--gmm-k0", type=int, default=4)
    sp.add_argument("--gmm-k1", type=int, default=2)
    sp.add_argument("--alpha", type=float, default=1.0, help="additive smoothing for categorical tables")
    sp.add_argument("--dataset", help="informational only")

    sp = cmd("train", cmd_train, "train encoders and classifier (single gamma or a sweep)")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--densities", required=True, help="directory holding density0.json and density1.json")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--gamma", type=_gamma, default=0.5)
    g.add_argument("--gammas", type=_gammas, help="comma-separated sweep, e.g. 0,0.02,0.1,0.2,0.9")
    sp.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at --seed")
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--steps-per-epoch", type=int)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--n-blocks", type=int, default=4)
    sp.add_argument("--flow-hidden", type=int, nargs="+", default=[32, 32])
    sp.add_argument("--clf-hidden", type=int, nargs="+", default=[50, 50])
    sp.add_argument("--scalarization", choices=["convex", "chebyshev"], default="convex")
    sp.add_argument("--cosine-decay", action="store_true")
    sp.add_argument("--restarts", type=int, default=1, help="keep the restart with the lowest validation loss")
    sp.add_argument("--probe-epochs", type=int, help="screen restarts after this many epochs")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes for sweeps")

    sp = cmd("certify", cmd_certify, "certify the statistical distance of an encoder or matching")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--matching")
    sp.add_argument("--densities")
    sp.add_argument("--cache", help="optional: adds label-conditional distances on the test split")
    sp.add_argument("--n", type=int, default=100_000, help="samples per group")
    sp.add_argument("--delta", type=float, default=0.05)
    sp.add_argument("--eps-target", type=float)

    sp = cmd("attack", cmd_attack, "train MLP adversaries on encoded data")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cache", required=True)
    sp.add_argument("--arch", nargs="+", default=["2x50"])
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--certificate", help="certificate.json to compare against")

    sp = cmd("eval", cmd_eval, "accuracy and fairness metrics of the downstream classifier")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cache", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)

    sp = cmd("match-discrete", cmd_match_discrete, "optimal bijective encoder for categorical data")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--gamma", type=_gamma, default=1.0)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--epochs", type=int, default=10, help="epochs of the labelling MLP")
    sp.add_argument("--dataset", help="informational only")

    sp = cmd("recourse", cmd_recourse, "counterfactual for one test row")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cache", required=True)
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--immutable", nargs="*", default=[])

    sp = sub.add_parser("rerun", help="replay a manifest into a new directory")
    sp.set_defaults(fn=cmd_rerun)
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None, _exit: bool = True):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = EXIT_USAGE if exc.code else EXIT_OK
        if _exit:
            raise
        return code
    args.argv = argv
    torch.set_num_threads(1)
    try:
        result = args.fn(args)
        code = result if isinstance(result, int) else EXIT_OK
    except (UsageError, ValueError) as exc:
        print(f"fnf: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"fnf: {exc}", file=sys.stderr)
        code = EXIT_MISSING
    except NumericalError as exc:
        print(f"fnf: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    if _exit and code:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
