"""Optimal bijective encoders over finite categorical domains.

With ``f_0`` fixed to the identity, the bijection ``f_1`` minimising the
statistical distance of the latent distributions sends the k-th least likely
point under ``p_1`` to the k-th least likely point under ``p_0``. A second,
accuracy-friendly bijection does the same inside each predicted-label class;
an encoder may mix the two with probability ``gamma``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    pass


@dataclass
class FiniteDomain:
    points: list  # list of tuples
    exhaustive: bool = True
    cardinalities: tuple = ()

    def __post_init__(self):
        self.points = [tuple(int(v) for v in p) for p in self.points]
        self._index = {p: i for i, p in enumerate(self.points)}
        if len(self._index) != len(self.points):
            raise DomainError("domain contains duplicate points")

    def __len__(self):
        return len(self.points)

    @classmethod
    def product(cls, cardinalities) -> "FiniteDomain":
        cards = tuple(int(c) for c in cardinalities)
        return cls(list(itertools.product(*[range(c) for c in cards])), True, cards)

    @classmethod
    def from_support(cls, rows, cardinalities=()) -> "FiniteDomain":
        uniq = sorted({tuple(int(v) for v in r) for r in np.asarray(rows)})
        return cls(uniq, False, tuple(cardinalities))

    def index(self, x) -> int:
        try:
            return self._index[tuple(int(v) for v in x)]
        except KeyError:
            raise DomainError(f"point {tuple(x)} is not in the domain") from None

    def indices(self, rows) -> np.ndarray:
        return np.array([self.index(r) for r in np.atleast_2d(rows)], dtype=np.int64)

    def array(self) -> np.ndarray:
        return np.array(self.points, dtype=np.int64)

    def to_json(self) -> dict:
        return {"points": [list(p) for p in self.points], "exhaustive": self.exhaustive,
                "cardinalities": list(self.cardinalities)}

    @classmethod
    def from_json(cls, obj) -> "FiniteDomain":
        return cls([tuple(p) for p in obj["points"]], obj["exhaustive"], tuple(obj["cardinalities"]))


MAX_EXHAUSTIVE = 10**6


def build_domain(cardinalities, observed_rows=None) -> FiniteDomain:
    """Full product domain, or the observed support when the product is too large."""
    size = int(np.prod([int(c) for c in cardinalities], dtype=object))
    if size <= MAX_EXHAUSTIVE or observed_rows is None:
        return FiniteDomain.product(cardinalities)
    return FiniteDomain.from_support(observed_rows, cardinalities)


def domain_probabilities(model, domain: FiniteDomain):
    """Exact model probabilities on the domain; on a support subset they are renormalised.

    Returns ``(p, missing_mass)``.
    """
    p = np.exp(model.log_prob(domain.array()))
    total = float(p.sum())
    missing = max(0.0, 1.0 - total)
    if not domain.exhaustive:
        p = p / total
    return p, missing


def _check_pair(p0, p1):
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if p0.shape != p1.shape or p0.ndim != 1:
        raise DomainError(f"probability vectors must live on the same domain ({p0.shape} vs {p1.shape})")
    for p in (p0, p1):
        if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
            raise DomainError("probability vectors must be non-negative and sum to 1")
    return p0, p1


def sorted_matching(p0, p1) -> np.ndarray:
    """perm[i] = latent index of input i for group 1; ties broken by domain index (stable sort)."""
    order0 = np.argsort(p0, kind="stable")
    order1 = np.argsort(p1, kind="stable")
    perm = np.empty(len(p0), dtype=np.int64)
    perm[order1] = order0
    return perm


def pushforward(p, perm) -> np.ndarray:
    out = np.zeros_like(p)
    np.add.at(out, perm, p)
    return out


def total_variation(q0, q1) -> float:
    return 0.5 * float(np.abs(np.asarray(q0) - np.asarray(q1)).sum())


@dataclass
class DiscreteMatching:
    """Group-1 bijections (group 0 is always the identity) plus the mixing weight.

    ``perm`` is the fairness-optimal map and ``label_perm`` the label-aware
    one; an input of group 1 is encoded with ``perm`` with probability
    ``gamma`` and with ``label_perm`` otherwise.
    """

    p0: np.ndarray
    p1: np.ndarray
    perm: np.ndarray
    label_perm: np.ndarray | None = None
    gamma: float = 1.0
    domain: FiniteDomain | None = None
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        m = len(self.perm)
        if sorted(self.perm.tolist()) != list(range(m)):
            raise DomainError("perm is not a bijection")
        if self.label_perm is not None:
            self.label_perm = np.asarray(self.label_perm, dtype=np.int64)
            if sorted(self.label_perm.tolist()) != list(range(m)):
                raise DomainError("label_perm is not a bijection")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError("gamma must lie in [0, 1]")
        if self.label_perm is None and self.gamma < 1.0:
            raise DomainError("gamma < 1 needs a label-split permutation")

    def with_gamma(self, gamma: float) -> "DiscreteMatching":
        return DiscreteMatching(self.p0, self.p1, self.perm, self.label_perm, gamma, self.domain, list(self.notes))

    def latent_distributions(self):
        pz1 = self.gamma * pushforward(self.p1, self.perm)
        if self.label_perm is not None and self.gamma < 1.0:
            pz1 = pz1 + (1.0 - self.gamma) * pushforward(self.p1, self.label_perm)
        return np.asarray(self.p0), pz1

    def sample_latents(self, a: int, n: int, rng: np.random.Generator) -> np.ndarray:
        p = self.p0 if a == 0 else self.p1
        idx = rng.choice(len(p), size=n, p=p / p.sum())
        return encode_indices(self, idx, a, rng)

    def to_json(self) -> dict:
        return {
            "p0": np.asarray(self.p0).tolist(),
            "p1": np.asarray(self.p1).tolist(),
            "perm": self.perm.tolist(),
            "label_perm": None if self.label_perm is None else self.label_perm.tolist(),
            "gamma": self.gamma,
            "domain": None if self.domain is None else self.domain.to_json(),
            "notes": list(self.notes),
        }

    @classmethod
    def from_json(cls, obj) -> "DiscreteMatching":
        dom = None if obj.get("domain") is None else FiniteDomain.from_json(obj["domain"])
        return cls(np.array(obj["p0"]), np.array(obj["p1"]), np.array(obj["perm"]),
                   None if obj["label_perm"] is None else np.array(obj["label_perm"]), obj["gamma"], dom,
                   list(obj.get("notes", [])))


def optimal_matching(p0, p1, domain: FiniteDomain | None = None) -> DiscreteMatching:
    p0, p1 = _check_pair(p0, p1)
    if domain is not None and len(domain) != len(p0):
        raise DomainError("probabilities do not match the domain size")
    return DiscreteMatching(p0, p1, sorted_matching(p0, p1), None, 1.0, domain)


def label_split_matching(p0, p1, predicted_label, domain: FiniteDomain | None = None,
                         gamma: float = 0.0) -> DiscreteMatching:
    """Sorted matching inside each predicted-label class, paired with the global optimum.

    Sorting is invariant to the per-class renormalisation, so the class-wise
    permutation is the optimum for the renormalised class distributions. A
    class carrying no mass in one group cannot be renormalised; it falls back
    to sorting the unnormalised probabilities and is flagged in ``notes``.
    """
    p0, p1 = _check_pair(p0, p1)
    labels = np.asarray(predicted_label).astype(int)
    if labels.shape != p0.shape:
        raise DomainError("need one predicted label per domain point")
    notes = []
    split = np.empty(len(p0), dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        m0, m1 = p0[idx].sum(), p1[idx].sum()
        if m0 <= 0 or m1 <= 0:
            notes.append(f"class {c} has no mass in group {0 if m0 <= 0 else 1}; unnormalised matching used")
        split[idx] = idx[sorted_matching(p0[idx], p1[idx])]
    return DiscreteMatching(p0, p1, sorted_matching(p0, p1), split, gamma, domain, notes)


def class_statistical_distance(match: DiscreteMatching, labels, c: int) -> float:
    """TV between the renormalised within-class latent distributions of the label-split map."""
    labels = np.asarray(labels)
    idx = labels == c
    q0 = np.where(idx, match.p0, 0.0)
    q1 = np.where(idx, match.p1, 0.0)
    q0, q1 = q0 / q0.sum(), q1 / q1.sum()
    return total_variation(q0, pushforward(q1, match.label_perm))


def encode_indices(match: DiscreteMatching, idx, a: int, rng: np.random.Generator, return_branch: bool = False):
    """Vectorised encoder over domain indices; the Bernoulli(gamma) draws come from ``rng``."""
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= len(match.perm)):
        raise DomainError("index outside the domain")
    if a == 0:
        out, branch = idx.copy(), np.ones(idx.shape, dtype=bool)
    else:
        branch = rng.random(idx.shape) < match.gamma if match.label_perm is not None else np.ones(idx.shape, bool)
        alt = match.label_perm if match.label_perm is not None else match.perm
        out = np.where(branch, match.perm[idx], alt[idx])
    return (out, branch) if return_branch else out


def encode_discrete(match: DiscreteMatching, x, a: int, rng: np.random.Generator):
    """Encode one domain point (tuple) or index; returns the latent point in the same form."""
    if match.domain is not None and np.ndim(x) == 1:
        z = encode_indices(match, [match.domain.index(x)], a, rng)[0]
        return match.domain.points[z]
    return int(encode_indices(match, [int(x)], a, rng)[0])


def discrete_statistical_distance(match: DiscreteMatching, p0=None, p1=None) -> float:
    """Exact 1/2 sum_z |p_Z0(z) - p_Z1(z)| of the (gamma-mixed) encoders."""
    if p0 is not None:
        match = DiscreteMatching(np.asarray(p0), np.asarray(p1), match.perm, match.label_perm, match.gamma,
                                 match.domain)
    q0, q1 = match.latent_distributions()
    return total_variation(q0, q1)


def brute_force_min_tv(p0, p1):
    """Minimum latent TV over all m! bijections (oracle for small m)."""
    p0, p1 = np.asarray(p0), np.asarray(p1)
    best, arg = np.inf, None
    for perm in itertools.permutations(range(len(p0))):
        tv = total_variation(p0, pushforward(p1, np.array(perm)))
        if tv < best:
            best, arg = tv, perm
    return best, np.array(arg)
