import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from akb.entropy import (
    BITS_CAP,
    DEFAULT_RATES,
    EntropyModel,
    GaussianParams,
    check_rate_set,
    entropy_map,
    predict_params,
    rate_loss,
    rate_preset_map,
    token_entropy,
)


def oracle_bits(y, mu, sigma):
    """Independent oracle: unit-bin Gaussian mass via erfc, floored at 1e-9."""
    z_hi = (y + 0.5 - mu) / sigma
    z_lo = (y - 0.5 - mu) / sigma
    p = 0.5 * (math.erfc(-z_hi / math.sqrt(2)) - math.erfc(-z_lo / math.sqrt(2)))
    return -math.log2(max(p, 1e-9))


# values computed once with oracle_bits and frozen
FROZEN = [((0.0, 0.0, 1.0), 1.384867), ((0.0, 0.0, 10.0), 4.648277), ((5.0, 0.0, 1.0), 18.175107)]


@pytest.mark.parametrize("args,bits", FROZEN)
def test_token_entropy_examples(args, bits):
    assert oracle_bits(*args) == pytest.approx(bits, abs=1e-5)
    assert token_entropy(*args) == pytest.approx(bits, abs=1e-3)


def test_token_entropy_named_values():
    p = 1 - 2 * 0.5 * math.erfc(0.5 / math.sqrt(2))
    assert p == pytest.approx(0.38292, abs=1e-5)
    assert token_entropy(0, 0, 1) == pytest.approx(1.3851, abs=1e-3)
    assert token_entropy(0, 0, 10) == pytest.approx(4.648, abs=1e-3)
    assert token_entropy(5, 0, 1) <= 29.897 + 1e-9


def test_token_entropy_floor_and_cap():
    assert BITS_CAP == pytest.approx(29.897353, abs=1e-6)
    assert token_entropy(100.0, 0.0, 0.01) == pytest.approx(BITS_CAP)
    assert token_entropy(0.0, 0.0, 0.001) == token_entropy(0.0, 0.0, 0.01)  # sigma clamped


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 100))
def test_token_entropy_matches_oracle(y, mu, s):
    assert token_entropy(y, mu, s) == pytest.approx(oracle_bits(y, mu, s), abs=1e-6, rel=1e-6)


def test_entropy_map_composition():
    f = np.array([[[0.0], [0.0], [5.0]]])
    gp = GaussianParams(np.zeros((1, 3, 1)), np.array([[[1.0], [10.0], [1.0]]]))
    np.testing.assert_allclose(entropy_map(f, gp)[0], [b for _, b in FROZEN], atol=1e-3)
    f4 = np.zeros((2, 2, 4))
    gp4 = GaussianParams(np.zeros((2, 2, 4)), np.ones((2, 2, 4)))
    np.testing.assert_allclose(entropy_map(f4, gp4), 4 * token_entropy(0, 0, 1))
    with pytest.raises(ValueError):
        entropy_map(np.zeros((2, 2, 3)), gp4)


def test_entropy_map_rounds_features():
    gp = GaussianParams(np.zeros((1, 1, 1)), np.ones((1, 1, 1)))
    assert entropy_map(np.array([[[0.3]]]), gp)[0, 0] == pytest.approx(token_entropy(0, 0, 1))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25)
def test_entropy_map_bounds(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(0, 20, (3, 3, 8))
    gp = GaussianParams(rng.normal(0, 5, f.shape), rng.uniform(0, 3, f.shape))
    e = entropy_map(f, gp)
    assert np.all(e >= 0) and np.all(e <= 8 * BITS_CAP + 1e-9)


def test_gaussian_params_clamp():
    gp = GaussianParams(np.zeros(3), np.array([0.0, 0.005, 2.0]))
    np.testing.assert_array_equal(gp.sigma, [0.01, 0.01, 2.0])


def test_rate_preset_examples():
    assert rate_preset_map(7.0, DEFAULT_RATES, 1.0) == 3
    assert rate_preset_map(0.0, DEFAULT_RATES, 0.5) == 0
    assert rate_preset_map(3.0, DEFAULT_RATES, 1.0) == 1  # tie between 2 and 4
    assert rate_preset_map(6.0, DEFAULT_RATES, 0.5) == 1  # eta * e = 3
    with pytest.raises(ValueError):
        rate_preset_map(1.0, (), 1.0)
    with pytest.raises(ValueError):
        rate_preset_map(1.0, DEFAULT_RATES, 0.0)


def test_rate_preset_idempotent():
    rates = np.asarray(DEFAULT_RATES, dtype=float)
    np.testing.assert_array_equal(rate_preset_map(rates, DEFAULT_RATES, 1.0), np.arange(len(rates)))
    np.testing.assert_array_equal(rate_preset_map(rates / 0.5, DEFAULT_RATES, 0.5), np.arange(len(rates)))


@given(st.lists(st.floats(0, 200), min_size=2, max_size=30), st.floats(0.05, 4))
def test_rate_preset_monotone(es, eta):
    es = np.sort(np.asarray(es))
    idx = rate_preset_map(es, DEFAULT_RATES, eta)
    assert np.all(np.diff(idx) >= 0)
    assert idx.min() >= 0 and idx.max() < len(DEFAULT_RATES)


def test_check_rate_set():
    assert check_rate_set([0, 1, 5]) == (0, 1, 5)
    for bad in ([], [-1, 2], [0, 2, 2], [4, 2]):
        with pytest.raises(ValueError):
            check_rate_set(bad)


def test_rate_loss_examples():
    assert rate_loss(np.zeros((4, 4))) == 0.0
    assert rate_loss(np.full((4, 4), 4.0)) == 4.0


def test_predict_params_init_and_clamp():
    torch.manual_seed(0)
    m = EntropyModel(8, 16)
    f = np.random.default_rng(0).normal(0, 3, (4, 4, 8))
    gp = predict_params(f, m)
    assert np.all(gp.mu == 0.0)
    np.testing.assert_allclose(gp.sigma, math.log(2.0), rtol=1e-6)  # softplus(0)
    gp2 = predict_params(f, m)
    assert np.array_equal(gp.sigma, gp2.sigma)
    with torch.no_grad():
        m.scale_head.bias.fill_(-50.0)
    assert np.all(predict_params(f, m).sigma >= 0.01)


def test_predict_params_non_finite():
    m = EntropyModel(4, 8)
    with torch.no_grad():
        m.scale_head.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        predict_params(np.zeros((1, 1, 4)), m)


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)


def test_entropy_gradient_check():
    """Analytic gradient of the rate loss matches central differences on a 2-token model."""
    torch.manual_seed(3)
    m = EntropyModel(3, 4).double()
    with torch.no_grad():
        for p in m.parameters():
            p.copy_(torch.randn_like(p) * 0.5)
    y = torch.tensor([[[[1.0, -2.0]], [[0.0, 3.0]], [[2.0, 1.0]]]], dtype=torch.float64)  # (1, 3, 1, 2)

    def loss():
        return m.entropy_map(y).mean()

    m.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in m.parameters()]).numpy()
    numeric = []
    h = 1e-4
    with torch.no_grad():
        for p in m.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    assert _rel_err(analytic, np.array(numeric)) < 1e-4
