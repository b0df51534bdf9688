import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from activesense.numerics import RngStream
from activesense.policy import PolicyConfig, SensingPolicy, log_prob, sample_action

from helpers import tiny_policy


@pytest.fixture
def policy():
    return SensingPolicy(tiny_policy(), RngStream(0))


def _inputs(n=6, seed=0, batch=()):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(*batch, 4, 4, generator=g), torch.rand(*batch, n, 2, generator=g) * 2 - 1,
            torch.randn(*batch, n, 1, generator=g))


def test_output_shapes(policy):
    z, c, v = _inputs(batch=(3,))
    mu, ls = policy(z, c, v)
    assert mu.shape == ls.shape == (3, 6, 2)


def test_default_size_shapes():
    p = SensingPolicy(PolicyConfig(), RngStream(0))
    g = torch.Generator().manual_seed(0)
    mu, ls = p(torch.randn(32, 16, generator=g), torch.rand(64, 2, generator=g) * 2 - 1,
               torch.randn(64, 1, generator=g))
    assert mu.shape == (64, 2) and ls.shape == (64, 2)


def test_initial_spread_and_mean_bounds(policy):
    mu, ls = policy(*_inputs())
    assert (mu.abs() <= policy.cfg.a_max).all()
    assert torch.allclose(ls.exp(), torch.full_like(ls, policy.cfg.init_std), rtol=0.1)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 12), st.integers(0, 1000))
def test_permutation_equivariant_bit_exact(n, seed):
    p = SensingPolicy(tiny_policy(), RngStream(0))
    z, c, v = _inputs(n, seed)
    perm = torch.from_numpy(np.random.default_rng(seed).permutation(n))
    mu, ls = p(z, c, v)
    mu2, ls2 = p(z, c[perm], v[perm])
    assert torch.equal(mu[perm], mu2) and torch.equal(ls[perm], ls2)


def test_identical_sensors_identical_outputs(policy):
    z, c, v = _inputs(5)
    c[3], v[3] = c[1], v[1]
    mu, ls = policy(z, c, v)
    assert torch.equal(mu[3], mu[1]) and torch.equal(ls[3], ls[1])


def test_input_validation(policy):
    z, c, v = _inputs()
    with pytest.raises(ValueError):
        policy(z, c[:0], v[:0])
    with pytest.raises(ValueError):
        policy(torch.randn(4, 3), c, v)
    with pytest.raises(ValueError):
        policy(z, c, v[:-1])
    with pytest.raises(RuntimeError):
        policy(z, c, v, with_value=True)


def test_value_head():
    p = SensingPolicy(tiny_policy(), RngStream(0), value_head=True)
    z, c, v = _inputs(batch=(2,))
    mu, ls, val = p(z, c, v, with_value=True)
    assert val.shape == (2,)
    perm = torch.tensor([5, 3, 1, 0, 2, 4])
    assert torch.equal(p(z, c[:, perm], v[:, perm], with_value=True)[2], val)


def test_tiny_sigma_returns_clipped_mean():
    mu = torch.tensor([[0.01, -0.2], [0.3, 0.0]])
    act = sample_action(mu, torch.full_like(mu, -20.0), 0.05, RngStream(0))
    assert torch.allclose(act.displacement, mu.clamp(-0.05, 0.05), atol=1e-7)


def test_samples_respect_clip_bounds():
    mu = torch.zeros(1000, 2)
    act = sample_action(mu, torch.zeros_like(mu), 0.05, RngStream(1))
    assert act.displacement.abs().max().item() == np.float32(0.05)
    assert act.pre_clip.abs().max().item() > 0.05
    assert torch.equal(act.log_prob, log_prob(act.pre_clip, mu, torch.zeros_like(mu)))


def test_log_prob_oracle():
    rng = np.random.default_rng(0)
    a, mu, ls = (rng.normal(size=(5, 2)) for _ in range(3))
    want = sum(-0.5 * ((a[:, i] - mu[:, i]) / np.exp(ls[:, i])) ** 2 - ls[:, i] - 0.5 * math.log(2 * math.pi)
               for i in range(2))
    got = log_prob(*(torch.from_numpy(x) for x in (a, mu, ls)))
    np.testing.assert_allclose(got.numpy(), want, atol=1e-12)


def test_log_prob_at_mode():
    mu, ls = torch.zeros(3, 2, dtype=torch.float64), torch.full((3, 2), -1.5, dtype=torch.float64)
    got = log_prob(mu, mu, ls)
    assert torch.allclose(got, torch.full((3,), -math.log(2 * math.pi) + 3.0, dtype=torch.float64))


def test_log_prob_symmetric():
    mu, ls = torch.tensor([0.1, -0.2]), torch.tensor([-2.0, -1.0])
    d = torch.tensor([0.03, 0.07])
    assert torch.allclose(log_prob(mu + d, mu, ls), log_prob(mu - d, mu, ls))
    with pytest.raises(ValueError):
        log_prob(torch.zeros(2), torch.zeros(3, 2), torch.zeros(3, 2))


def test_sampling_deterministic(policy):
    mu, ls = policy(*_inputs())
    a = sample_action(mu, ls, 0.05, RngStream(3, "a"))
    b = sample_action(mu, ls, 0.05, RngStream(3, "a"))
    assert torch.equal(a.pre_clip, b.pre_clip)


def test_config_roundtrip():
    cfg = tiny_policy()
    assert PolicyConfig.from_dict(cfg.to_dict()) == cfg
