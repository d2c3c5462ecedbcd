"""Joint training of the encoder pair and the downstream classifier.

The fairness term is the Monte Carlo symmetrised KL between the two latent
distributions, evaluated with exact latent densities obtained by change of
variables. The module also carries the small adversarial-training baseline
used to show how unstable min-max fair representation learning is.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .downstream import Classifier, balanced_accuracy, bce_with_logits, fit_classifier
from .flow import FlowEncoderPair, latent_log_density_t
from .numerics import AdamState, NumericalError, ParamVector, Rng, adam_step, value_and_grad


class DivergenceError(NumericalError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TrainConfig:
    gamma: float = 0.5
    epochs: int = 60
    batch_size: int = 128
    steps_per_epoch: int | None = None  # default: ceil(n_train / batch_size)
    lr: float = 0.01
    lr_flow: float | None = None
    lr_clf: float | None = None
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cosine_decay: bool = False
    seed: int = 0
    scalarization: str = "convex"
    batch_source: str = "density"
    n_blocks: int = 4
    flow_hidden: tuple = (32, 32)
    s_max: float = 5.0
    clf_hidden: tuple = (50, 50)
    standardize: bool = True
    val_samples: int = 4000

    def __post_init__(self):
        self.flow_hidden = tuple(self.flow_hidden)
        self.clf_hidden = tuple(self.clf_hidden)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.scalarization not in ("convex", "chebyshev"):
            raise ValueError(f"unknown scalarization {self.scalarization!r}")
        if self.batch_source not in ("density", "data"):
            raise ValueError(f"unknown batch source {self.batch_source!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["flow_hidden"] = list(self.flow_hidden)
        d["clf_hidden"] = list(self.clf_hidden)
        return d

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


TRACE_COLUMNS = ("epoch", "L0", "L1", "L_clf", "joint", "val_delta", "val_accuracy", "val_joint")


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({k: float(row[k]) for k in TRACE_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self) -> str:
        lines = [",".join(TRACE_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(repr(r[c]) if c != "epoch" else str(int(r[c])) for c in TRACE_COLUMNS))
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- losses


def kl_surrogate_losses_t(pair: FlowEncoderPair, theta0, theta1, bases, x0: torch.Tensor, x1: torch.Tensor):
    """Batch estimates of KL(p_Z0 || p_Z1) and KL(p_Z1 || p_Z0) as torch scalars."""
    z0, ld00 = pair.f0.forward_t(theta0, x0)
    z1, ld11 = pair.f1.forward_t(theta1, x1)
    own0 = bases[0].log_prob_torch(x0) - ld00
    own1 = bases[1].log_prob_torch(x1) - ld11
    cross0 = latent_log_density_t(pair.f1, theta1, bases[1], z0)
    cross1 = latent_log_density_t(pair.f0, theta0, bases[0], z1)
    return _checked_mean(own0 - cross0, x0, 0), _checked_mean(own1 - cross1, x1, 1)


def _checked_mean(t, xs, g):
    bad = ~torch.isfinite(t)
    if bool(bad.any()):
        i = int(torch.nonzero(bad)[0])
        raise NumericalError(f"non-finite latent log-density for group {g} sample {xs[i].tolist()}")
    return t.mean()


def kl_surrogate_losses(pair: FlowEncoderPair, bases, batch_0, batch_1):
    with torch.no_grad():
        L0, L1 = kl_surrogate_losses_t(pair, pair.f0.params.tensor(), pair.f1.params.tensor(), bases,
                                       torch.as_tensor(np.asarray(batch_0, dtype=np.float64)),
                                       torch.as_tensor(np.asarray(batch_1, dtype=np.float64)))
    return float(L0), float(L1)


class RunningNorm:
    """Running min/max of each objective; Chebyshev terms are rescaled to [0, 1] with them."""

    def __init__(self):
        self.lo = {}
        self.hi = {}

    def update(self, name, value):
        self.lo[name] = min(self.lo.get(name, value), value)
        self.hi[name] = max(self.hi.get(name, value), value)

    def __call__(self, name, value):
        lo, hi = self.lo.get(name, 0.0), self.hi.get(name, 1.0)
        span = hi - lo
        return (value - lo) / (span if span > 1e-12 else 1.0)


def joint_loss(L0, L1, L_clf, gamma: float, mode: str = "convex", norm: RunningNorm | None = None):
    """Scalarise fairness and classification losses (works on floats and torch scalars)."""
    if mode == "convex":
        return gamma * (L0 + L1) + (1.0 - gamma) * L_clf
    if mode == "chebyshev":
        fair, clf = L0 + L1, L_clf
        if norm is not None:
            fair, clf = norm("fair", fair), norm("clf", clf)
        a, b = gamma * fair, (1.0 - gamma) * clf
        if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
            return torch.maximum(torch.as_tensor(a), torch.as_tensor(b))
        return max(a, b)
    raise ValueError(f"unknown scalarization {mode!r}")


# --------------------------------------------------------------------------- FNF training


MODEL_FORMAT_VERSION = 1


@dataclass
class FNFModel:
    pair: FlowEncoderPair
    classifier: Classifier
    config: TrainConfig
    epoch: int = 0

    def joint_params(self) -> ParamVector:
        return ParamVector.concat([self.pair.f0.params, self.pair.f1.params, self.classifier.params], ["f0", "f1", "h"])

    def with_joint(self, values) -> "FNFModel":
        n0, n1 = len(self.pair.f0.params), len(self.pair.f1.params)
        v = np.asarray(values)
        pair = FlowEncoderPair(self.pair.f0.with_params(v[:n0]), self.pair.f1.with_params(v[n0 : n0 + n1]), dict(self.pair.meta))
        return FNFModel(pair, self.classifier.with_params(v[n0 + n1 :]), self.config, self.epoch)

    def encode(self, x, a):
        return self.pair.encode(x, a)

    def to_json(self) -> dict:
        return {"format_version": MODEL_FORMAT_VERSION, "kind": "fnf", "config": self.config.to_json(),
                "epoch": self.epoch, "pair": self.pair.to_json(), "classifier": self.classifier.to_json()}

    @classmethod
    def from_json(cls, obj) -> "FNFModel":
        if obj.get("format_version") != MODEL_FORMAT_VERSION or obj.get("kind") != "fnf":
            raise ValueError(f"unsupported model file (format_version={obj.get('format_version')!r})")
        return cls(FlowEncoderPair.from_json(obj["pair"]), Classifier.from_json(obj["classifier"]),
                   TrainConfig.from_json(obj["config"]), int(obj["epoch"]))


def _split_theta(model: FNFModel, theta):
    n0, n1 = len(model.pair.f0.params), len(model.pair.f1.params)
    return theta[:n0], theta[n0 : n0 + n1], theta[n0 + n1 :]


def batch_losses_t(model: FNFModel, bases, theta, xs0, xs1, xc, yc):
    """L0, L1 on fairness batches (xs0, xs1) and L_clf on labelled batches ``xc[a], yc[a]``."""
    t0, t1, th = _split_theta(model, theta)
    pair = model.pair
    # one forward pass per encoder covers both the fairness and the labelled batch
    zz0, ld0 = pair.f0.forward_t(t0, torch.cat([xs0, xc[0]]))
    zz1, ld1 = pair.f1.forward_t(t1, torch.cat([xs1, xc[1]]))
    n0, n1 = xs0.shape[0], xs1.shape[0]
    z0, z1 = zz0[:n0], zz1[:n1]
    own0 = bases[0].log_prob_torch(xs0) - ld0[:n0]
    own1 = bases[1].log_prob_torch(xs1) - ld1[:n1]
    cross0 = latent_log_density_t(pair.f1, t1, bases[1], z0)
    cross1 = latent_log_density_t(pair.f0, t0, bases[0], z1)
    L0, L1 = _checked_mean(own0 - cross0, xs0, 0), _checked_mean(own1 - cross1, xs1, 1)
    clf = [bce_with_logits(model.classifier.logits_t(th, zz[n:]), yc[a]) for a, zz, n in ((0, zz0, n0), (1, zz1, n1))]
    return L0, L1, 0.5 * (clf[0] + clf[1])


def make_loss_fn(model: FNFModel, bases, xs0, xs1, xc, yc, gamma, mode="convex", norm=None):
    """Closure ``theta -> joint loss`` over fixed batches (used for training and grad checks)."""

    def fn(theta):
        L0, L1, Lc = batch_losses_t(model, bases, theta, xs0, xs1, xc, yc)
        return joint_loss(L0, L1, Lc, gamma, mode, norm)

    return fn


def init_model(config: TrainConfig, dim: int, x_train=None, rng: Rng | None = None) -> FNFModel:
    rng = Rng(config.seed) if rng is None else rng
    init = rng.stream("init")
    shift = scale = None
    if config.standardize and x_train is not None:
        shift = np.asarray(x_train, dtype=np.float64).mean(axis=0)
        scale = np.asarray(x_train, dtype=np.float64).std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    pair = FlowEncoderPair.create(dim, config.n_blocks, config.flow_hidden, config.s_max, init, shift, scale)
    h = Classifier.create(dim, config.clf_hidden, init)
    return FNFModel(pair, h, config)


def estimate_val_delta(model: FNFModel, bases, n: int, gen: np.random.Generator) -> float:
    from .certify import FlowAdversary, estimate_delta

    return estimate_delta(FlowAdversary(model.pair, bases), bases, n, gen)


def _lr_vector(model: FNFModel, cfg: TrainConfig, scale: float) -> np.ndarray:
    n0, n1, nh = len(model.pair.f0.params), len(model.pair.f1.params), len(model.classifier.params)
    lf = cfg.lr if cfg.lr_flow is None else cfg.lr_flow
    lc = cfg.lr if cfg.lr_clf is None else cfg.lr_clf
    return scale * np.concatenate([np.full(n0 + n1, lf), np.full(nh, lc)])


@dataclass
class TrainResult:
    best: FNFModel
    final: FNFModel
    trace: TrainTrace
    best_epoch: int


def train_fnf(config: TrainConfig, densities, dataset, val=None, log=None, stop_after: int | None = None) -> TrainResult:
    """Learn f_0, f_1 and h by Adam on the scalarised loss.

    ``densities`` is ``(p0_hat, p1_hat)`` fitted on the training split;
    ``dataset`` is the training :class:`~fnf.data.TabularDataset` providing
    labelled rows for the classification term, ``val`` the validation split.
    """
    cfg = config
    rng = Rng(cfg.seed)
    X, A, Y = dataset.x.astype(np.float64), dataset.a.astype(int), dataset.y.astype(np.float64)
    model = init_model(cfg, X.shape[1], X, rng)
    batch_rng, sample_rng, eval_rng = rng.stream("batching"), rng.stream("sampling"), rng.stream("eval")
    idx = [np.flatnonzero(A == g) for g in (0, 1)]
    if min(len(i) for i in idx) == 0:
        raise ValueError("training split must contain both groups")
    steps = cfg.steps_per_epoch or max(1, math.ceil(X.shape[0] / cfg.batch_size))
    params, state = model.joint_params(), AdamState.zeros(len(model.joint_params()))
    norm = RunningNorm() if cfg.scalarization == "chebyshev" else None
    trace = TrainTrace()
    Xt, Yt = torch.as_tensor(X), torch.as_tensor(Y)
    vX = vA = vY = None
    if val is not None:
        vX, vA, vY = val.x.astype(np.float64), val.a.astype(int), val.y.astype(int)
    best, best_loss, best_epoch = None, math.inf, 0
    total = cfg.epochs * steps
    for epoch in range(min(cfg.epochs, stop_after or cfg.epochs)):
        sums = np.zeros(4)
        for s in range(steps):
            it = epoch * steps + s
            bidx = [batch_rng.choice(i, size=cfg.batch_size, replace=len(i) < cfg.batch_size) for i in idx]
            if cfg.batch_source == "density":
                xs0 = torch.as_tensor(densities[0].sample(cfg.batch_size, sample_rng))
                xs1 = torch.as_tensor(densities[1].sample(cfg.batch_size, sample_rng))
            else:
                xs0, xs1 = Xt[bidx[0]], Xt[bidx[1]]
            xc = [Xt[b] for b in bidx]
            yc = [Yt[b] for b in bidx]
            parts = {}

            def fn(theta):
                L0, L1, Lc = batch_losses_t(model, densities, theta, xs0, xs1, xc, yc)
                parts.update(L0=float(L0.detach()), L1=float(L1.detach()), Lc=float(Lc.detach()))
                return joint_loss(L0, L1, Lc, cfg.gamma, cfg.scalarization, norm)

            try:
                res = value_and_grad(fn, params)
            except NumericalError as exc:
                raise DivergenceError(f"loss diverged at epoch {epoch}, step {s}: {exc}", trace) from exc
            if norm is not None:
                norm.update("fair", parts["L0"] + parts["L1"])
                norm.update("clf", parts["Lc"])
            scale = 0.5 * (1 + math.cos(math.pi * it / total)) if cfg.cosine_decay else 1.0
            params, state = adam_step(params, res.gradient, state, lr=_lr_vector(model, cfg, scale),
                                      beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
            sums += (parts["L0"], parts["L1"], parts["Lc"], res.loss)
        current = model.with_joint(params.values)
        current.epoch = epoch + 1
        means = sums / steps
        val_delta, val_acc, val_joint = _validate(current, densities, cfg, eval_rng, vX, vA, vY, norm)
        trace.append(epoch=epoch + 1, L0=means[0], L1=means[1], L_clf=means[2], joint=means[3],
                     val_delta=val_delta, val_accuracy=val_acc, val_joint=val_joint)
        if log:
            log(trace.rows[-1])
        if val_joint < best_loss:
            best, best_loss, best_epoch = current, val_joint, epoch + 1
    final = model.with_joint(params.values)
    final.epoch = len(trace)
    return TrainResult(best if best is not None else final, final, trace, best_epoch or len(trace))


def restart_seed(seed: int, k: int) -> int:
    return seed if k == 0 else Rng(seed).child(k).seed


def train_fnf_restarts(config: TrainConfig, densities, dataset, val, restarts: int = 3, probe_epochs: int | None = None,
                       log=None):
    """Best of ``restarts`` independent initialisations by validation joint loss.

    Restart 0 uses ``config.seed``, restart k the seed ``restart_seed(seed, k)``.
    With ``probe_epochs`` every restart is trained only that far, compared on
    its last validation joint loss, and the winner alone is trained to the
    end; otherwise all restarts run in full and are compared at the end.
    Returns ``(result, scores)`` where ``scores`` holds the compared losses.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    if restarts == 1:
        res = train_fnf(config, densities, dataset, val, log)
        return res, [res.trace.rows[-1]["val_joint"]]
    best, scores = None, []
    for k in range(restarts):
        cfg = replace(config, seed=restart_seed(config.seed, k))
        res = train_fnf(cfg, densities, dataset, val, log, stop_after=probe_epochs)
        scores.append(res.trace.rows[-1]["val_joint"])
        if best is None or scores[-1] < min(scores[:-1]):
            best = (cfg, res)
    cfg, res = best
    if probe_epochs is not None and probe_epochs < cfg.epochs:
        res = train_fnf(cfg, densities, dataset, val, log)
    return res, scores


def _validate(model: FNFModel, densities, cfg, gen, vX, vA, vY, norm):
    n = cfg.val_samples
    x0 = torch.as_tensor(densities[0].sample(n, gen))
    x1 = torch.as_tensor(densities[1].sample(n, gen))
    with torch.no_grad():
        th = model.joint_params().tensor()
        t0, t1, thh = _split_theta(model, th)
        L0, L1 = kl_surrogate_losses_t(model.pair, t0, t1, densities, x0, x1)
        # optimal-adversary distance on the same samples
        z0, _ = model.pair.f0.forward_t(t0, x0)
        z1, _ = model.pair.f1.forward_t(t1, x1)
        mu = []
        for z in (z0, z1):
            lp0 = latent_log_density_t(model.pair.f0, t0, densities[0], z)
            lp1 = latent_log_density_t(model.pair.f1, t1, densities[1], z)
            mu.append((lp0 <= lp1).double().mean())
        delta = abs(float(mu[0] - mu[1]))
        if vX is not None:
            z = torch.as_tensor(model.encode(vX, vA))
            logits = model.classifier.logits_t(thh, z)
            y = torch.as_tensor(vY, dtype=torch.float64)
            Lc = 0.5 * sum(bce_with_logits(logits[torch.as_tensor(vA == g)], y[torch.as_tensor(vA == g)]) for g in (0, 1))
            acc = balanced_accuracy(vY, (logits.numpy() >= 0).astype(int))
        else:
            Lc, acc = torch.tensor(0.0), float("nan")
    joint = float(joint_loss(L0, L1, Lc, cfg.gamma, cfg.scalarization, norm))
    if not math.isfinite(joint):
        joint = math.inf
    return delta, acc, joint


# --------------------------------------------------------------------------- adversarial baseline


@dataclass
class AdvConfig:
    gamma: float = 1.0
    steps: int = 1500
    batch_size: int = 256
    lr: float = 1e-3
    enc_hidden: tuple = (20, 20)
    latent_dim: int = 8
    clf_hidden: tuple = (20,)
    adv_hidden: tuple = (20,)
    adv_steps: int = 1
    seed: int = 0


@dataclass
class AdvResult:
    encoder: Classifier  # reused MLP container; output layer has latent_dim units
    adversary: Classifier
    classifier: Classifier
    joint_adv_accuracy: float
    recovery_rate: float
    task_accuracy: float
    refit_accuracy: float = float("nan")
    failed: bool = False
    message: str = ""


def _mlp(in_dim, hidden, out_dim, rng):
    from .flow import mlp_init, mlp_segments

    sizes = (in_dim, *hidden, out_dim)
    return Classifier(in_dim, tuple(hidden), ParamVector(np.concatenate(mlp_init(sizes, rng, zero_last=False)),
                                                         tuple(mlp_segments("", sizes))))


def _mlp_out(net: Classifier, theta, x):
    from .flow import mlp_apply

    return mlp_apply(net.params.split(theta), "", net.n_layers, x, torch.relu)


def train_adversarial_baseline(config: AdvConfig, dataset, test=None, attack_hidden=(50, 50), attack_epochs=20):
    """Min-max fair representation learning: encoder/classifier vs. an adversary.

    Alternates one adversary step (minimise its BCE for ``a``) with one
    encoder/classifier step on ``L_clf - gamma * L_adv``. Returns the
    adversary's held-out accuracy at the end of joint training and the
    recovery rate of a fresh ``attack_hidden`` MLP retrained on the frozen
    encoder.
    """
    cfg = config
    rng = Rng(cfg.seed)
    init, batch = rng.stream("init"), rng.stream("batching")
    X = np.column_stack([dataset.x, dataset.a]).astype(np.float64)
    A, Y = dataset.a.astype(np.float64), dataset.y.astype(np.float64)
    enc = _mlp(X.shape[1], cfg.enc_hidden, cfg.latent_dim, init)
    clf = _mlp(cfg.latent_dim, cfg.clf_hidden, 1, init)
    adv = _mlp(cfg.latent_dim, cfg.adv_hidden, 1, init)
    ne, nc = len(enc.params), len(clf.params)
    main = ParamVector.concat([enc.params, clf.params], ["enc", "clf"])
    mstate, astate = AdamState.zeros(len(main)), AdamState.zeros(len(adv.params))
    advp = adv.params
    Xt, At, Yt = (torch.as_tensor(v) for v in (X, A, Y))
    failed, message = False, ""
    for step in range(cfg.steps):
        b = torch.as_tensor(batch.integers(0, X.shape[0], cfg.batch_size))
        with torch.no_grad():
            z = _mlp_out(enc, main.tensor()[:ne], Xt[b])
        try:
            for _ in range(cfg.adv_steps):
                r = value_and_grad(lambda th: bce_with_logits(_mlp_out(adv, th, z)[:, 0], At[b]), advp)
                advp, astate = adam_step(advp, r.gradient, astate, lr=cfg.lr)
            ath = advp.tensor()

            def fn(th):
                zz = _mlp_out(enc, th[:ne], Xt[b])
                l_clf = bce_with_logits(_mlp_out(clf, th[ne:], zz)[:, 0], Yt[b])
                l_adv = bce_with_logits(_mlp_out(adv, ath, zz)[:, 0], At[b])
                return l_clf - cfg.gamma * l_adv

            r = value_and_grad(fn, main)
            main, mstate = adam_step(main, r.gradient, mstate, lr=cfg.lr)
        except NumericalError as exc:
            failed, message = True, f"diverged at step {step}: {exc}"
            break
    enc = enc.with_params(main.values[:ne])
    clf = clf.with_params(main.values[ne:])
    adv = adv.with_params(advp)
    test = dataset if test is None else test
    Xte = torch.as_tensor(np.column_stack([test.x, test.a]).astype(np.float64))
    with torch.no_grad():
        zte = _mlp_out(enc, enc.params.tensor(), Xte).numpy()
        ztr = _mlp_out(enc, enc.params.tensor(), Xt).numpy()
        adv_pred = (_mlp_out(adv, adv.params.tensor(), torch.as_tensor(zte))[:, 0] >= 0).numpy().astype(int)
        task_pred = (_mlp_out(clf, clf.params.tensor(), torch.as_tensor(zte))[:, 0] >= 0).numpy().astype(int)
    if not (np.all(np.isfinite(zte)) and np.all(np.isfinite(ztr))):
        return AdvResult(enc, adv, clf, float("nan"), float("nan"), float("nan"), float("nan"), True,
                         message or "non-finite latents")
    joint_acc = balanced_accuracy(test.a, adv_pred)
    attacker = fit_classifier(ztr, dataset.a, attack_hidden, rng.stream("eval"), epochs=attack_epochs, lr=1e-3)
    recovery = balanced_accuracy(test.a, attacker.predict(zte))
    task = balanced_accuracy(test.y, task_pred)
    # recovery rate: the stronger of the joint-training adversary and the refit attacker
    return AdvResult(enc, adv, clf, joint_acc, max(recovery, joint_acc), task, recovery, failed, message)
