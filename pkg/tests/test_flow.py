import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from fnf.density import DensityModel, GaussianMixture
from fnf.flow import (
    CouplingLayer,
    FlowEncoder,
    FlowEncoderPair,
    FlowError,
    forward,
    inverse,
    latent_log_density,
    latent_log_density_t,
    parity_mask,
)
from fnf.numerics import grad_check


def randomised(enc: FlowEncoder, seed: int, scale: float = 0.3) -> FlowEncoder:
    rng = np.random.default_rng(seed)
    return enc.with_params(rng.normal(0, scale, len(enc.params)))


def normal_base(dim, mean=0.0, sd=1.0):
    return DensityModel(GaussianMixture.from_covariances(np.ones(1), np.full((1, dim), mean),
                                                         (sd**2 * np.eye(dim))[None]))


def numerical_logdet(enc, x, h=1e-6):
    d = x.size
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (enc.forward(x + e)[0] - enc.forward(x - e)[0]) / (2 * h)
    return np.linalg.slogdet(J)[1]


def test_masks_alternate_and_split_odd_dims():
    assert parity_mask(5, 0).tolist() == [True, False, True, False, True]
    assert parity_mask(5, 1).tolist() == [False, True, False, True, False]
    with pytest.raises(ValueError):
        CouplingLayer(np.ones(3, dtype=bool))


def test_identity_at_initialisation():
    enc = FlowEncoder.create(3, n_blocks=4, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(20, 3))
    z, ld = enc.forward(x)
    assert np.array_equal(z, x) and np.all(ld == 0)
    back, ldi = enc.inverse(z)
    assert np.array_equal(back, x) and np.all(ldi == 0)


def test_constant_log_scale_layer():
    enc = FlowEncoder.create(4, n_layers=1, rng=np.random.default_rng(0))
    c, layer = 0.7, enc.layers[0]
    k = layer.trans.size
    vals = enc.params.values.copy()
    bias = enc.params.split(np.arange(len(vals)))["c0.b2"]
    vals[bias[:k]] = layer.s_max * np.arctanh(c / layer.s_max)  # raw value mapping to log-scale c
    enc = enc.with_params(vals)
    _, ld = enc.forward(np.random.default_rng(0).normal(size=(5, 4)))
    assert np.allclose(ld, k * c, atol=1e-12)


def test_scale_clamp():
    enc = randomised(FlowEncoder.create(2, n_layers=1, rng=np.random.default_rng(0)), 0, scale=50.0)
    layer = enc.layers[0]
    p = enc.params.split(enc.params.tensor())
    _, s = layer.shift_and_log_scale(p, "c0.", torch.randn(100, 1) * 100)
    assert float(s.abs().max()) <= layer.s_max


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_logdet_matches_numerical_jacobian(d, seed):
    enc = randomised(FlowEncoder.create(d, n_blocks=4, rng=np.random.default_rng(seed)), seed)
    x = np.random.default_rng(seed + 1).normal(size=d)
    _, ld = enc.forward(x)
    num = numerical_logdet(enc, x)
    assert abs(ld - num) <= 1e-4 * max(1.0, abs(num))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_round_trip_and_logdet_cancel(d, seed):
    rng = np.random.default_rng(seed)
    enc = randomised(FlowEncoder.create(d, n_blocks=4, rng=rng, shift=rng.normal(size=d),
                                        scale=rng.uniform(0.5, 2, d)), seed)
    x = rng.normal(0, 2, size=(1000, d))
    z, ld = forward(enc, x)
    back, ldi = inverse(enc, z)
    assert np.max(np.abs(back - x)) < 1e-6
    assert np.max(np.abs(ld + ldi)) < 1e-8


def test_non_finite_input_fails():
    enc = FlowEncoder.create(2)
    with pytest.raises(FlowError):
        enc.forward(np.array([np.nan, 0.0]))


def test_overflow_reports_layer():
    enc = FlowEncoder.create(2, n_blocks=6)
    enc = enc.with_params(np.full(len(enc.params), 1e300))
    with pytest.raises(FlowError, match="layer"):
        enc.forward(np.ones((1, 2)))


def test_identity_flow_latent_density_is_input_density():
    base = normal_base(2)
    pair = FlowEncoderPair.create(2, n_blocks=2)
    z = np.random.default_rng(0).normal(size=(10, 2))
    assert np.allclose(latent_log_density(pair, (base, base), 0, z), base.log_prob(z), atol=1e-14)


def test_affine_change_of_variables():
    # z = 2x + 1 realised by the standardisation (x - shift) / scale
    enc = FlowEncoder.create(1, n_layers=0, shift=[-0.5], scale=[0.5])
    pair = FlowEncoderPair(enc, enc)
    base = normal_base(1)
    z = np.linspace(-4, 4, 9)[:, None]
    want = norm.logpdf((z[:, 0] - 1) / 2) - np.log(2)
    assert np.allclose(latent_log_density(pair, (base, base), 0, z), want, atol=1e-12)


def test_latent_density_normalises_1d():
    enc = randomised(FlowEncoder.create(1, n_blocks=3), 2, scale=0.5)
    base = DensityModel(GaussianMixture.from_covariances(np.array([0.4, 0.6]), np.array([[-1.0], [1.5]]),
                                                         np.array([[[0.3]], [[0.8]]])))
    pair = FlowEncoderPair(enc, enc)
    grid = np.linspace(-40, 40, 200_001)
    dens = np.exp(latent_log_density(pair, (base, base), 0, grid[:, None]))
    assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-3


def test_latent_density_normalises_2d():
    enc = randomised(FlowEncoder.create(2, n_blocks=2), 3, scale=0.15)
    base = normal_base(2)
    pair = FlowEncoderPair(enc, enc)
    g = np.linspace(-25, 25, 1201)
    Z = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    dens = np.exp(latent_log_density(pair, (base, base), 0, Z)).reshape(g.size, g.size)
    assert abs(np.trapezoid(np.trapezoid(dens, g, axis=1), g) - 1.0) < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_latent_density_parameter_gradients(seed):
    enc = randomised(FlowEncoder.create(2, n_blocks=2, hidden=(8, 8)), seed)
    base = normal_base(2)
    z = torch.as_tensor(np.random.default_rng(seed).normal(size=(16, 2)))
    assert grad_check(lambda th: latent_log_density_t(enc, th, base, z).mean(), enc.params) < 1e-4


def test_pair_encode_and_json():
    pair = FlowEncoderPair(randomised(FlowEncoder.create(3, 2, group=0), 0),
                           randomised(FlowEncoder.create(3, 2, group=1), 1), {"note": "x"})
    x = np.random.default_rng(0).normal(size=(6, 3))
    a = np.array([0, 1, 0, 1, 1, 0])
    z = pair.encode(x, a)
    assert np.allclose(z[a == 1], pair.f1.forward(x[a == 1])[0])
    back = FlowEncoderPair.from_json(json.loads(json.dumps(pair.to_json())))
    assert np.array_equal(back.encode(x, a), z)
    with pytest.raises(ValueError):
        FlowEncoderPair(FlowEncoder.create(2), FlowEncoder.create(3))
