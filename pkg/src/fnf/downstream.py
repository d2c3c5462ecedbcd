"""Downstream classifier on latents, group fairness metrics and recourse."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .flow import mlp_apply, mlp_init, mlp_segments
from .numerics import AdamState, ParamVector, adam_step, value_and_grad

ACTIVATIONS = {"relu": torch.relu, "tanh": torch.tanh}


@dataclass
class Classifier:
    """Feed-forward binary classifier; outputs P(y=1 | input)."""

    in_dim: int
    hidden: tuple
    params: ParamVector
    activation: str = "relu"

    @classmethod
    def create(cls, in_dim: int, hidden=(50, 50), rng=None, activation="relu") -> "Classifier":
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = (in_dim, *hidden, 1)
        vals = mlp_init(sizes, rng, zero_last=False)
        return cls(in_dim, tuple(hidden), ParamVector(np.concatenate(vals), tuple(mlp_segments("", sizes))), activation)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def with_params(self, params) -> "Classifier":
        pv = params if isinstance(params, ParamVector) else self.params.with_values(params)
        return Classifier(self.in_dim, self.hidden, pv, self.activation)

    def logits_t(self, theta: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        p = self.params.split(theta)
        return mlp_apply(p, "", self.n_layers, z, ACTIVATIONS[self.activation])[:, 0]

    def predict_proba(self, z) -> np.ndarray:
        with torch.no_grad():
            out = torch.sigmoid(self.logits_t(self.params.tensor(), torch.as_tensor(np.atleast_2d(z), dtype=torch.float64)))
        return out.numpy()

    def predict(self, z, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(z) >= threshold).astype(int)

    def to_json(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": list(self.hidden), "activation": self.activation,
                "params": self.params.to_json()}

    @classmethod
    def from_json(cls, obj) -> "Classifier":
        return cls(obj["in_dim"], tuple(obj["hidden"]), ParamVector.from_json(obj["params"]), obj["activation"])


def bce_with_logits(logits: torch.Tensor, y: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    losses = torch.nn.functional.binary_cross_entropy_with_logits(logits, y, reduction="none")
    if weight is None:
        return losses.mean()
    return (losses * weight).sum() / weight.sum()


def fit_classifier(X, y, hidden=(50, 50), rng=None, epochs: int = 30, batch_size: int = 128, lr: float = 1e-3,
                   weight_decay: float = 0.0, balanced: bool = True, activation: str = "relu",
                   max_steps: int | None = None) -> Classifier:
    """Minibatch Adam on (optionally class-balanced) binary cross-entropy."""
    rng = np.random.default_rng(0) if rng is None else rng
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    clf = Classifier.create(X.shape[1], hidden, rng, activation)
    if balanced:
        p1 = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        w = np.where(y == 1, 0.5 / p1, 0.5 / (1 - p1))
    else:
        w = np.ones_like(y)
    Xt, yt, wt = torch.as_tensor(X), torch.as_tensor(y), torch.as_tensor(w)
    params, state = clf.params, AdamState.zeros(len(clf.params))
    n = X.shape[0]
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.as_tensor(perm[start : start + batch_size])
            res = value_and_grad(lambda th: bce_with_logits(clf.logits_t(th, Xt[idx]), yt[idx], wt[idx]), params)
            params, state = adam_step(params, res.gradient, state, lr=lr, weight_decay=weight_decay)
            step += 1
            if max_steps is not None and step >= max_steps:
                return clf.with_params(params)
    return clf.with_params(params)


# --------------------------------------------------------------------------- metrics


def balanced_accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true).astype(int), np.asarray(y_pred).astype(int)
    rates = [np.mean(y_pred[y_true == c] == c) for c in (0, 1) if np.any(y_true == c)]
    return float(np.mean(rates))


@dataclass
class FairnessMetrics:
    accuracy: float
    balanced_accuracy: float
    demographic_parity: float
    equalized_odds: float | None
    equalized_odds_per_y: dict = field(default_factory=dict)
    equal_opportunity: float | None = None
    threshold: float = 0.5

    def as_row(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "demographic_parity": self.demographic_parity,
            "equalized_odds": self.equalized_odds,
            "equal_opportunity": self.equal_opportunity,
            "threshold": self.threshold,
        }


def metrics_from_predictions(pred, a, y, threshold: float = 0.5) -> FairnessMetrics:
    """Fairness metrics from hard predictions. Gaps for empty (a, y) cells are None, not 0."""
    pred, a, y = (np.asarray(v).astype(int) for v in (pred, a, y))
    for g in (0, 1):
        if not np.any(a == g):
            raise ValueError(f"test set has no rows with a={g}")
    dp = abs(pred[a == 0].mean() - pred[a == 1].mean())
    per_y = {}
    for lab in (0, 1):
        cells = [(a == g) & (y == lab) for g in (0, 1)]
        per_y[lab] = None if not all(c.any() for c in cells) else float(abs(pred[cells[0]].mean() - pred[cells[1]].mean()))
    eo = None if None in per_y.values() else max(per_y.values())
    return FairnessMetrics(
        accuracy=float(np.mean(pred == y)),
        balanced_accuracy=balanced_accuracy(y, pred),
        demographic_parity=float(dp),
        equalized_odds=eo,
        equalized_odds_per_y=per_y,
        equal_opportunity=per_y[1],
        threshold=threshold,
    )


def demographic_parity_from_counts(pred, a) -> float:
    """Same quantity as ``metrics_from_predictions(...).demographic_parity`` via confusion counts."""
    pred, a = np.asarray(pred).astype(int), np.asarray(a).astype(int)
    pos = [int(np.sum((pred == 1) & (a == g))) for g in (0, 1)]
    tot = [int(np.sum(a == g)) for g in (0, 1)]
    return abs(pos[0] / tot[0] - pos[1] / tot[1])


def best_threshold(h: Classifier, z_val, y_val) -> float:
    """Threshold maximising balanced accuracy on validation latents."""
    probs = h.predict_proba(z_val)
    cands = np.unique(np.concatenate([[0.5], np.quantile(probs, np.linspace(0.01, 0.99, 99))]))
    scores = [balanced_accuracy(y_val, probs >= t) for t in cands]
    return float(cands[int(np.argmax(scores))])


def eval_metrics(h: Classifier, z, a, y, threshold: float = 0.5) -> FairnessMetrics:
    return metrics_from_predictions(h.predict(z, threshold), a, y, threshold)


# --------------------------------------------------------------------------- recourse


@dataclass
class RecourseResult:
    found: bool
    x: np.ndarray
    x_tilde: np.ndarray | None = None
    delta: np.ndarray | None = None
    z: np.ndarray | None = None
    z_tilde: np.ndarray | None = None
    reason: str = ""
    actionable: bool = True

    def to_json(self) -> dict:
        arr = lambda v: None if v is None else np.asarray(v).tolist()
        return {"found": self.found, "x": arr(self.x), "x_tilde": arr(self.x_tilde), "delta": arr(self.delta),
                "reason": self.reason, "actionable": self.actionable}


def recourse(pair, h: Classifier, x, a: int, latents, steps: int = 100, immutable=(),
             threshold: float = 0.5) -> RecourseResult:
    """Counterfactual for a rejected point by interpolating towards the nearest accepted latent.

    ``latents`` are dataset latents; the nearest one (l2) with a positive
    prediction is the target. The earliest accepted point on the segment is
    mapped back through ``f_a^{-1}``. ``actionable`` is False when any
    feature listed in ``immutable`` changed.
    """
    x = np.asarray(x, dtype=np.float64)
    enc = pair[a]
    z = enc.forward(x)[0]
    if h.predict(z[None], threshold)[0] == 1:
        return RecourseResult(True, x, x.copy(), np.zeros_like(x), z, z, "already accepted")
    latents = np.asarray(latents, dtype=np.float64)
    accepted = latents[h.predict(latents, threshold) == 1]
    if accepted.size == 0:
        return RecourseResult(False, x, reason="no accepted latent exists")
    target = accepted[np.argmin(np.sum((accepted - z) ** 2, axis=1))]
    ts = np.linspace(0.0, 1.0, steps + 1)[1:]
    path = z[None] + ts[:, None] * (target - z)[None]
    ok = np.flatnonzero(h.predict(path, threshold) == 1)
    z_tilde = path[ok[0]] if ok.size else target
    x_tilde = enc.inverse(z_tilde)[0]
    # re-check after inversion; fall back along the path if round-off flipped the decision
    for cand in ([z_tilde] + [path[i] for i in ok[1:]] + [target]):
        x_tilde = enc.inverse(cand)[0]
        if h.predict(enc.forward(x_tilde)[0][None], threshold)[0] == 1:
            z_tilde = cand
            break
    else:
        return RecourseResult(False, x, reason="no point on the path survives inversion")
    delta = x_tilde - x
    actionable = not any(abs(delta[i]) > 1e-9 for i in immutable)
    return RecourseResult(True, x, x_tilde, delta, z, z_tilde, "", actionable)
