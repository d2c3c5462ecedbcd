"""Affine coupling flows used as the per-group encoders.

A :class:`FlowEncoder` is a fixed standardisation followed by a stack of
affine coupling layers with alternating parity masks (one block = two layers
with complementary masks). Every transform is computed in torch from the flat
parameter tensor, so the same code serves training (autodiff) and inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .numerics import NumericalError, ParamVector

DEFAULT_HIDDEN = (32, 32)
DEFAULT_SMAX = 5.0


class FlowError(NumericalError):
    pass


def parity_mask(d: int, layer: int) -> np.ndarray:
    """Boolean mask of conditioning (pass-through) coordinates for a layer."""
    idx = np.arange(d)
    mask = (idx % 2) == (layer % 2)
    if d == 1:
        # a single coordinate has nothing to condition on: elementwise affine layer
        return np.zeros(1, dtype=bool)
    return mask


def mlp_segments(prefix: str, sizes) -> list:
    segs = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        segs += [(f"{prefix}W{i}", (a, b)), (f"{prefix}b{i}", (b,))]
    return segs


def mlp_init(sizes, rng: np.random.Generator, zero_last: bool = True) -> list:
    parts = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            W = np.zeros((a, b))
        else:
            W = rng.standard_normal((a, b)) / np.sqrt(max(a, 1))
        parts += [W.ravel(), np.zeros(b)]
    return parts


def mlp_apply(p: dict, prefix: str, n_layers: int, x: torch.Tensor, act=torch.tanh) -> torch.Tensor:
    h = x
    for i in range(n_layers):
        h = h @ p[f"{prefix}W{i}"] + p[f"{prefix}b{i}"]
        if i < n_layers - 1:
            h = act(h)
    return h


@dataclass
class CouplingLayer:
    """Static description of one coupling layer; weights live in the encoder's ParamVector."""

    mask: np.ndarray
    hidden: tuple = DEFAULT_HIDDEN
    s_max: float = DEFAULT_SMAX

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        d = self.mask.size
        self.cond = np.flatnonzero(self.mask)
        self.trans = np.flatnonzero(~self.mask)
        if self.trans.size == 0:
            raise ValueError("coupling layer must transform at least one coordinate")
        if d > 1 and self.cond.size == 0:
            raise ValueError("coupling layer must condition on at least one coordinate")
        self.inv_perm = torch.as_tensor(np.argsort(np.concatenate([self.cond, self.trans])))
        self.cond_t = torch.as_tensor(self.cond)
        self.trans_t = torch.as_tensor(self.trans)

    @property
    def sizes(self) -> tuple:
        return (self.cond.size, *self.hidden, 2 * self.trans.size)

    def shift_and_log_scale(self, p: dict, prefix: str, x_cond: torch.Tensor):
        out = mlp_apply(p, prefix, len(self.sizes) - 1, x_cond)
        k = self.trans.size
        raw, shift = out[:, :k], out[:, k:]
        log_scale = self.s_max * torch.tanh(raw / self.s_max)
        return shift, log_scale

    def _assemble(self, a, b):
        return torch.cat([a, b], dim=1)[:, self.inv_perm]

    def forward(self, p, prefix, x):
        xc, xt = x[:, self.cond_t], x[:, self.trans_t]
        shift, s = self.shift_and_log_scale(p, prefix, xc)
        return self._assemble(xc, xt * torch.exp(s) + shift), s.sum(dim=1)

    def inverse(self, p, prefix, y):
        yc, yt = y[:, self.cond_t], y[:, self.trans_t]
        shift, s = self.shift_and_log_scale(p, prefix, yc)
        return self._assemble(yc, (yt - shift) * torch.exp(-s)), -s.sum(dim=1)


@dataclass
class FlowEncoder:
    """Invertible encoder f_a: standardise, then apply coupling layers in order."""

    dim: int
    layers: list
    params: ParamVector
    group: int = 0
    shift: np.ndarray = None
    scale: np.ndarray = None

    def __post_init__(self):
        self.shift = np.zeros(self.dim) if self.shift is None else np.asarray(self.shift, dtype=np.float64)
        self.scale = np.ones(self.dim) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("standardisation scale must be positive")
        self._shift_t = torch.as_tensor(self.shift)
        self._scale_t = torch.as_tensor(self.scale)
        self._std_logdet = -float(np.log(self.scale).sum())

    @classmethod
    def create(cls, dim: int, n_blocks: int = 4, hidden=DEFAULT_HIDDEN, s_max: float = DEFAULT_SMAX,
               rng: np.random.Generator | None = None, group: int = 0, shift=None, scale=None,
               n_layers: int | None = None) -> "FlowEncoder":
        """Fresh encoder whose final net layers are zero, i.e. the identity map after standardising."""
        rng = np.random.default_rng(0) if rng is None else rng
        n_layers = 2 * n_blocks if n_layers is None else n_layers
        layers = [CouplingLayer(parity_mask(dim, i), tuple(hidden), s_max) for i in range(n_layers)]
        segs, vals = [], []
        for i, layer in enumerate(layers):
            segs += mlp_segments(f"c{i}.", layer.sizes)
            vals += mlp_init(layer.sizes, rng)
        values = np.concatenate(vals) if vals else np.zeros(0)
        return cls(dim, layers, ParamVector(values, tuple(segs)), group, shift, scale)

    def with_params(self, params) -> "FlowEncoder":
        pv = params if isinstance(params, ParamVector) else self.params.with_values(params)
        return FlowEncoder(self.dim, self.layers, pv, self.group, self.shift, self.scale)

    # -- torch paths -------------------------------------------------------------------
    def forward_t(self, theta: torch.Tensor, x: torch.Tensor, check: bool = False):
        p = self.params.split(theta)
        h = (x - self._shift_t) / self._scale_t
        log_det = torch.full((x.shape[0],), self._std_logdet)
        for i, layer in enumerate(self.layers):
            h, ld = layer.forward(p, f"c{i}.", h)
            log_det = log_det + ld
            if check and not bool(torch.isfinite(h).all()):
                raise FlowError(f"non-finite output in coupling layer {i}")
        return h, log_det

    def inverse_t(self, theta: torch.Tensor, z: torch.Tensor, check: bool = False):
        p = self.params.split(theta)
        h = z
        log_det = torch.full((z.shape[0],), -self._std_logdet)
        for i in reversed(range(len(self.layers))):
            h, ld = self.layers[i].inverse(p, f"c{i}.", h)
            log_det = log_det + ld
            if check and not bool(torch.isfinite(h).all()):
                raise FlowError(f"non-finite output in coupling layer {i} (inverse)")
        return h * self._scale_t + self._shift_t, log_det

    # -- numpy conveniences ------------------------------------------------------------
    def _run(self, fn, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x.reshape(1, -1) if single else x
        if X.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise FlowError("input contains non-finite values")
        with torch.no_grad():
            out, ld = fn(self.params.tensor(), torch.as_tensor(X), check=True)
        out, ld = out.numpy(), ld.numpy()
        return (out[0], float(ld[0])) if single else (out, ld)

    def forward(self, x):
        return self._run(self.forward_t, x)

    def inverse(self, z):
        return self._run(self.inverse_t, z)

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "group": self.group,
            "masks": [l.mask.astype(int).tolist() for l in self.layers],
            "hidden": list(self.layers[0].hidden) if self.layers else [],
            "s_max": self.layers[0].s_max if self.layers else DEFAULT_SMAX,
            "standardize": {"shift": self.shift.tolist(), "scale": self.scale.tolist()},
            "params": self.params.to_json(),
        }

    @classmethod
    def from_json(cls, obj) -> "FlowEncoder":
        layers = [CouplingLayer(np.array(m, dtype=bool), tuple(obj["hidden"]), obj["s_max"]) for m in obj["masks"]]
        std = obj["standardize"]
        return cls(obj["dim"], layers, ParamVector.from_json(obj["params"]), obj["group"],
                   np.array(std["shift"]), np.array(std["scale"]))


@dataclass
class FlowEncoderPair:
    f0: FlowEncoder
    f1: FlowEncoder
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.f0.dim != self.f1.dim:
            raise ValueError("encoders must share the input dimension")

    @property
    def dim(self) -> int:
        return self.f0.dim

    def __getitem__(self, a: int) -> FlowEncoder:
        return (self.f0, self.f1)[int(a)]

    @classmethod
    def create(cls, dim, n_blocks=4, hidden=DEFAULT_HIDDEN, s_max=DEFAULT_SMAX, rng=None, shift=None, scale=None):
        rng = np.random.default_rng(0) if rng is None else rng
        f0 = FlowEncoder.create(dim, n_blocks, hidden, s_max, rng, 0, shift, scale)
        f1 = FlowEncoder.create(dim, n_blocks, hidden, s_max, rng, 1, shift, scale)
        return cls(f0, f1)

    def encode(self, x, a) -> np.ndarray:
        """Encode rows of ``x`` with the encoder of their group ``a``."""
        x = np.asarray(x, dtype=np.float64)
        a = np.asarray(a).astype(int)
        z = np.empty_like(x)
        for g in (0, 1):
            if np.any(a == g):
                z[a == g] = self[g].forward(x[a == g])[0]
        return z

    def to_json(self) -> dict:
        return {"f0": self.f0.to_json(), "f1": self.f1.to_json(), "meta": self.meta}

    @classmethod
    def from_json(cls, obj) -> "FlowEncoderPair":
        return cls(FlowEncoder.from_json(obj["f0"]), FlowEncoder.from_json(obj["f1"]), dict(obj.get("meta", {})))


def forward(enc: FlowEncoder, x):
    return enc.forward(x)


def inverse(enc: FlowEncoder, z):
    return enc.inverse(z)


def latent_log_density_t(enc: FlowEncoder, theta: torch.Tensor, base, z: torch.Tensor) -> torch.Tensor:
    """log p_{Z_a}(z) = log p_a(f_a^{-1}(z)) + log|det d f_a^{-1}/dz|, differentiable in theta and z."""
    x, ld = enc.inverse_t(theta, z)
    return base.log_prob_torch(x) + ld


def latent_log_density(pair: FlowEncoderPair, bases, a: int, z) -> np.ndarray | float:
    enc, base = pair[a], bases[int(a)]
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = z.reshape(1, -1) if single else z
    if not np.all(np.isfinite(Z)):
        raise FlowError("latent point contains non-finite values")
    x, ld = enc.inverse(Z)
    out = base.log_prob(x) + ld
    return float(out[0]) if single else out
