"""Optimal adversary, finite-sample statistical distance and certified bounds.

The optimal adversary predicts group 1 exactly when the latent density of
group 1 is at least that of group 0. Averaging it over fresh samples of both
groups gives an estimate of the statistical distance; a Hoeffding margin
turns that into a high-probability upper bound on any adversary's accuracy.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .downstream import balanced_accuracy, fit_classifier

DEFAULT_ATTACKS = ((8,), (50, 50), (200, 200, 200))


@dataclass
class FlowAdversary:
    """Likelihood-ratio classifier over latents of a flow encoder pair."""

    pair: object
    bases: tuple

    def log_densities(self, z):
        from .flow import latent_log_density

        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return latent_log_density(self.pair, self.bases, 0, z), latent_log_density(self.pair, self.bases, 1, z)

    def predict(self, z) -> np.ndarray:
        from .flow import FlowError

        lp0, lp1 = self.log_densities(z)
        # a mixture density is never exactly zero; -inf here means overflow and would fake a tie
        if not (np.all(np.isfinite(lp0)) and np.all(np.isfinite(lp1))):
            raise FlowError("non-finite latent log-density; the encoder pair is numerically broken")
        return (lp0 <= lp1).astype(int)

    def encode(self, x, a: int):
        return self.pair[a].forward(x)[0]


@dataclass
class DiscreteAdversary:
    """Likelihood-ratio classifier over latent indices of a discrete matching."""

    matching: object

    def predict(self, z) -> np.ndarray:
        pz0, pz1 = self.matching.latent_distributions()
        z = np.asarray(z, dtype=int)
        return (pz0[z] <= pz1[z]).astype(int)


def optimal_adversary_predict(adv, z) -> np.ndarray | int:
    """1 iff p_{Z_0}(z) <= p_{Z_1}(z); ties go to group 1."""
    z = np.asarray(z)
    single = isinstance(adv, FlowAdversary) and z.ndim == 1 or (not isinstance(adv, FlowAdversary) and z.ndim == 0)
    out = adv.predict(z[None] if single else z)
    return int(out[0]) if single else out


def _sample_latents(adv, bases, n, rng):
    if isinstance(adv, FlowAdversary):
        return [adv.encode(bases[g].sample(n, rng), g) for g in (0, 1)]
    return [adv.matching.sample_latents(g, n, rng) for g in (0, 1)]


def estimate_delta(adv, bases, n: int, rng: np.random.Generator) -> float:
    """|mean mu*(z_0) - mean mu*(z_1)| over ``n`` fresh samples per group."""
    if n < 1:
        raise ValueError("n must be at least 1")
    z0, z1 = _sample_latents(adv, bases, n, rng)
    return abs(float(np.mean(adv.predict(z0))) - float(np.mean(adv.predict(z1))))


def estimate_delta_from_latents(adv, z0, z1) -> float:
    return abs(float(np.mean(adv.predict(z0))) - float(np.mean(adv.predict(z1))))


def hoeffding_epsilon(n: int, delta: float) -> float:
    """Margin eps with P(Delta <= Delta_hat + eps) >= 1 - delta for n samples per group."""
    if n < 1 or not 0 < delta < 1:
        raise ValueError("need n >= 1 and delta in (0, 1)")
    return math.sqrt(-2.0 * math.log((1.0 - math.sqrt(1.0 - delta)) / 2.0) / n)


def required_samples_exact(eps: float, delta: float) -> float:
    return -2.0 * math.log((1.0 - math.sqrt(1.0 - delta)) / 2.0) / eps**2


def required_samples(eps: float, delta: float) -> int:
    """Smallest n with n >= -2 log((1 - sqrt(1 - delta)) / 2) / eps^2."""
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ValueError("eps and delta must lie in (0, 1)")
    bound = required_samples_exact(eps, delta)
    # shave relative round-off so an exactly integral bound is not bumped up by one
    n = math.ceil(bound * (1.0 - 1e-12))
    return int(n)


def max_adversarial_accuracy(delta_hat: float, eps: float) -> float:
    return (1.0 + min(1.0, max(0.0, delta_hat + eps))) / 2.0


@dataclass
class CertificationReport:
    delta_hat: float
    n: int
    epsilon: float
    delta: float
    max_adv_acc: float
    demographic_parity_bound: float
    equalized_odds_delta: dict = field(default_factory=dict)
    attack_accuracies: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.delta_hat <= 1.0:
            raise ValueError("delta_hat must lie in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("statistical distance (empirical)", f"{self.delta_hat:.4f}"),
            ("samples per group", str(self.n)),
            ("Hoeffding margin eps", f"{self.epsilon:.4f}"),
            ("failure probability", f"{self.delta:g}"),
            ("certified max adversarial accuracy", f"{self.max_adv_acc:.4f}"),
            ("demographic parity bound", f"{self.demographic_parity_bound:.4f}"),
        ]
        for y, v in sorted(self.equalized_odds_delta.items()):
            rows.append((f"label-conditional distance (y={y})", f"{v:.4f}"))
        for arch, acc in self.attack_accuracies.items():
            rows.append((f"attack {arch}", f"{acc:.4f}"))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows)


def certify(adv, bases, n: int, delta: float, rng: np.random.Generator, eps_target: float | None = None,
            labelled=None) -> CertificationReport:
    """Certify an encoder (FlowAdversary) or a matching (DiscreteAdversary).

    ``labelled`` optionally holds ``(z, a, y)`` arrays of encoded data, from
    which per-label distances of the optimal adversary are reported as an
    equalized-odds certificate.
    """
    notes = []
    if eps_target is not None and n < required_samples(eps_target, delta):
        raise ValueError(f"n={n} is below the {required_samples(eps_target, delta)} samples needed for eps={eps_target}")
    dh = estimate_delta(adv, bases, n, rng)
    eps = hoeffding_epsilon(n, delta)
    eo = {}
    if labelled is not None:
        z, a, y = labelled
        for lab in (0, 1):
            cells = [(np.asarray(a) == g) & (np.asarray(y) == lab) for g in (0, 1)]
            if all(c.any() for c in cells):
                eo[lab] = estimate_delta_from_latents(adv, z[cells[0]], z[cells[1]])
        notes.append("label-conditional distances are empirical on encoded data (interpretation of the equalized-odds bound)")
    return CertificationReport(dh, n, eps, delta, max_adversarial_accuracy(dh, eps), min(1.0, dh + eps), eo, {}, notes)


def arch_name(hidden) -> str:
    hidden = tuple(hidden)
    if len(set(hidden)) == 1:
        return f"{len(hidden)}x{hidden[0]}"
    return "-".join(map(str, hidden))


def parse_arch(text: str) -> tuple:
    """'2x50' -> (50, 50); '64-50' -> (64, 50)."""
    text = text.strip().lower()
    if "x" in text:
        k, w = text.split("x")
        return (int(w),) * int(k)
    return tuple(int(t) for t in text.split("-"))


@dataclass
class AttackResult:
    arch: str
    accuracies: list
    failures: list

    @property
    def best(self) -> float:
        finite = [a for a in self.accuracies if np.isfinite(a)]
        return max(finite) if finite else float("nan")


def attack_mlp(z_train, a_train, z_test, a_test, hidden=(50, 50), seeds=(0, 1, 2, 3, 4), epochs: int = 30,
               lr: float = 1e-3, batch_size: int = 128, max_steps: int | None = None) -> AttackResult:
    """Train an MLP adversary per seed; balanced held-out accuracy of each run."""
    accs, failures = [], []
    for s in seeds:
        try:
            clf = fit_classifier(z_train, a_train, hidden, np.random.default_rng(s), epochs=epochs, lr=lr,
                                 batch_size=batch_size, max_steps=max_steps)
            accs.append(balanced_accuracy(a_test, clf.predict(z_test)))
        except Exception as exc:  # a diverged seed is recorded, not fatal
            accs.append(float("nan"))
            failures.append(f"seed {s}: {exc}")
    return AttackResult(arch_name(hidden), accs, failures)
