"""Flat parameter vectors, seeded randomness, gradient checking and Adam.

All models in the package keep their trainable weights in a single flat
float64 array (:class:`ParamVector`). Computation happens in torch so that
gradients come from reverse-mode autodiff; the optimizer and serializer only
ever see the flat numpy array.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

torch.set_default_dtype(torch.float64)

RNG_ALGORITHM = "numpy.PCG64"
STREAMS = ("init", "batching", "sampling", "eval", "mixing")


class NumericalError(RuntimeError):
    """Raised when a computation produces NaN/Inf where a finite value is required."""


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter array with named, shaped segments.

    ``segments`` is a tuple of ``(name, shape)`` pairs whose sizes add up to
    ``len(values)``. The array itself is copied and made read-only, so a
    ParamVector never changes after construction; optimizers return new ones.
    """

    values: np.ndarray
    segments: tuple = ()

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(vals)):
            raise NumericalError("parameter vector contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        segs = tuple((str(n), tuple(int(s) for s in shp)) for n, shp in self.segments)
        if segs and sum(int(np.prod(s)) for _, s in segs) != vals.size:
            raise ValueError("segment shapes do not cover the parameter vector")
        object.__setattr__(self, "segments", segs)

    def __len__(self):
        return self.values.size

    def with_values(self, values) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != self.values.size:
            raise ValueError(f"expected {self.values.size} values, got {values.size}")
        return ParamVector(values, self.segments)

    def split(self, flat):
        """Slice ``flat`` (numpy array or torch tensor) into a dict of shaped views."""
        if isinstance(flat, torch.Tensor):
            # one split node keeps the backward pass to a single concatenation
            sizes = [int(np.prod(s)) for _, s in self.segments]
            chunks = torch.split(flat, sizes)
            return {name: c.reshape(shape) for (name, shape), c in zip(self.segments, chunks)}
        out, i = {}, 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            out[name] = flat[i : i + n].reshape(shape)
            i += n
        return out

    def tensor(self, requires_grad: bool = False) -> torch.Tensor:
        return torch.tensor(self.values, dtype=torch.float64, requires_grad=requires_grad)

    def to_json(self) -> dict:
        return {
            "values": self.values.tolist(),
            "segments": [[n, list(s)] for n, s in self.segments],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ParamVector":
        return cls(np.asarray(obj["values"], dtype=np.float64), tuple((n, tuple(s)) for n, s in obj["segments"]))

    @classmethod
    def concat(cls, parts: Sequence["ParamVector"], prefixes: Sequence[str]) -> "ParamVector":
        values = np.concatenate([p.values for p in parts]) if parts else np.zeros(0)
        segs = tuple((f"{pre}.{n}", s) for p, pre in zip(parts, prefixes) for n, s in p.segments)
        return cls(values, segs)


@dataclass
class GradResult:
    loss: float
    gradient: np.ndarray

    def __post_init__(self):
        self.gradient = np.asarray(self.gradient, dtype=np.float64)
        if not (np.isfinite(self.loss) and np.all(np.isfinite(self.gradient))):
            raise NumericalError(f"non-finite loss or gradient (loss={self.loss})")


def value_and_grad(loss_fn: Callable[[torch.Tensor], torch.Tensor], params: ParamVector) -> GradResult:
    """Evaluate a torch scalar loss of the flat parameter tensor and its gradient."""
    theta = params.tensor(requires_grad=True)
    loss = loss_fn(theta)
    (grad,) = torch.autograd.grad(loss, theta, allow_unused=True)
    grad = np.zeros(len(params)) if grad is None else grad.detach().numpy()
    return GradResult(float(loss.detach()), grad)


def grad_check(loss_fn, point: ParamVector, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = value_and_grad(loss_fn, point).gradient
    base = point.values.copy()
    err = 0.0
    with torch.no_grad():
        for i in range(base.size):
            probes = []
            for sign in (1.0, -1.0):
                v = base.copy()
                v[i] += sign * step
                val = float(loss_fn(torch.tensor(v)))
                if not np.isfinite(val):
                    raise NumericalError(f"non-finite loss at probe point (coordinate {i})")
                probes.append(val)
            numeric = (probes[0] - probes[1]) / (2 * step)
            err = max(err, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return err


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_step(params: ParamVector, grad, state: AdamState, lr: float = 0.01, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected Adam update. Pure: returns ``(new_params, new_state)``.

    ``weight_decay`` is added to the gradient as an L2 term before the moment
    updates (coupled decay, as in the classic Adam formulation).
    """
    g = np.asarray(grad, dtype=np.float64).ravel()
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ValueError(f"shape mismatch: params {params.values.shape}, grad {g.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient passed to adam_step")
    if weight_decay:
        g = g + weight_decay * params.values
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.with_values(new), AdamState(m, v, t)


@dataclass
class Rng:
    """Seeded generator factory with independent per-purpose streams.

    Streams are derived from ``numpy.random.SeedSequence(seed)`` by spawn key,
    so asking for the ``"batching"`` stream never perturbs ``"init"``.
    """

    seed: int
    algorithm: str = field(default=RNG_ALGORITHM, init=False)

    def stream(self, purpose: str, *extra: int) -> np.random.Generator:
        key = STREAMS.index(purpose) if purpose in STREAMS else (zlib.crc32(purpose.encode()) + len(STREAMS))
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(key, *extra))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *extra: int) -> "Rng":
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(99, *extra))
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))


def torch_generator(gen: np.random.Generator) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(gen.integers(0, 2**63 - 1)))
    return g
