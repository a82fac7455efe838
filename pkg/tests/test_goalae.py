import math

import pytest
import torch
from torch import nn

from director.diffcore import ContractViolation
from director.goalae import (
    GoalAutoencoder,
    check_one_hot,
    kl_to_uniform,
    row_entropy,
    straight_through_sample,
)

from conftest import central_difference


def test_code_has_eight_ones_of_sixty_four():
    ae = GoalAutoencoder(20, layers=1, units=16)
    code = ae.encode(torch.randn(50, 20))
    assert code.flat.shape == (50, 64)
    assert torch.equal(code.flat.detach().sum(-1), torch.full((50,), 8.0))
    assert set(code.flat.detach().unique().tolist()) <= {0.0, 1.0}
    assert torch.allclose(code.probs.sum(-1), torch.ones(50, 8))


def test_sample_is_deterministic_under_seed():
    ae = GoalAutoencoder(6, layers=1, units=8)
    x = torch.randn(4, 6)
    torch.manual_seed(9)
    a = ae.encode(x).flat
    torch.manual_seed(9)
    assert torch.equal(a, ae.encode(x).flat)


def test_uniform_logits_sample_uniformly():
    n, c = 10_000, 4
    counts = straight_through_sample(torch.zeros(n, c)).detach().sum(0)
    sigma = math.sqrt(n * (1 / c) * (1 - 1 / c))
    assert bool(((counts - n / c).abs() < 3 * sigma).all())


def test_straight_through_expected_gradient():
    # With a fixed linear decoder E[dec(z)] = dec(probs); the estimator's mean
    # gradient must match the finite-difference gradient of dec(probs).
    torch.manual_seed(2)
    logits = torch.randn(2, 2, dtype=torch.float64)
    w = torch.randn(4, 3, dtype=torch.float64)
    c = torch.randn(3, dtype=torch.float64)
    decode = lambda z: (z.reshape(4) @ w) @ c

    numeric = central_difference(lambda: decode(torch.softmax(logits, -1)), logits)
    total = torch.zeros_like(logits)
    draws = 200
    for _ in range(draws):
        x = logits.clone().requires_grad_(True)
        z = straight_through_sample(x)
        assert set(z.detach().unique().tolist()) <= {0.0, 1.0}
        total += torch.autograd.grad(decode(z), x)[0]
    mean = total / draws
    assert float((mean - numeric).norm() / numeric.norm()) < 1e-2


def test_mode_sample_is_argmax():
    logits = torch.tensor([[0.1, 2.0, -1.0], [3.0, 0.0, 0.0]])
    z = straight_through_sample(logits, sample=False).detach()
    assert torch.equal(z, torch.tensor([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]))


def test_kl_to_uniform_identity():
    logits = torch.randn(100, 8, 8, dtype=torch.float64) * 3
    probs = torch.softmax(logits, -1)
    direct = (probs * (probs.log() - math.log(1 / 8))).sum((-2, -1))
    via_entropy = (math.log(8) - row_entropy(logits)).sum(-1)
    assert torch.allclose(kl_to_uniform(logits), direct, atol=1e-6)
    assert torch.allclose(kl_to_uniform(logits), via_entropy, atol=1e-6)
    assert bool(((direct >= -1e-9) & (direct <= 8 * math.log(8) + 1e-9)).all())


def test_kl_to_uniform_extremes():
    assert kl_to_uniform(torch.zeros(8, 8, dtype=torch.float64)).item() == pytest.approx(0.0, abs=1e-6)
    peaked = torch.full((8, 8), -1e3)
    peaked[:, 0] = 1e3
    assert kl_to_uniform(peaked).item() == pytest.approx(8 * math.log(8), abs=1e-4)
    assert 8 * math.log(8) == pytest.approx(16.64, abs=5e-3)


def test_decode_width_and_zero_decoder():
    ae = GoalAutoencoder(10, layers=1, units=8)
    for p in ae.decoder.parameters():
        nn.init.zeros_(p)
    with torch.no_grad():
        ae.decoder.head.bias.copy_(torch.arange(10.0))
    out = ae.decode(ae.encode(torch.randn(3, 10)))
    assert out.shape == (3, 10)
    assert torch.equal(out, torch.arange(10.0).expand(3, 10))


def test_decode_rejects_bad_codes():
    ae = GoalAutoencoder(10, layers=1, units=8)
    with pytest.raises(ContractViolation):
        ae.decode(torch.full((1, 64), 0.125))
    with pytest.raises(ContractViolation):
        ae.decode(torch.zeros(1, 32))
    with pytest.raises(ContractViolation):
        check_one_hot(torch.zeros(1, 64), 8, 8)


def test_loss_does_not_reach_features():
    ae = GoalAutoencoder(6, layers=1, units=8)
    feats = torch.randn(5, 6, requires_grad=True)
    loss, metrics = ae.loss(feats)
    loss.backward()
    assert feats.grad is None
    assert set(metrics) == {"goal_ae_loss", "goal_ae_recon", "goal_ae_kl"}
    assert ae.beta == 1.0


def test_exploration_reward():
    ae = GoalAutoencoder(544, layers=1, units=8)
    for p in ae.decoder.parameters():
        nn.init.zeros_(p)
    target = torch.randn(544)
    with torch.no_grad():
        ae.decoder.head.bias.copy_(target)
    assert ae.exploration_reward(target[None]).item() == pytest.approx(0.0, abs=1e-8)
    assert ae.exploration_reward((target + 0.1)[None]).item() == pytest.approx(5.44, rel=1e-4)
    fresh = GoalAutoencoder(7, layers=1, units=8)
    x = torch.randn(30, 7, requires_grad=True)
    r = fresh.exploration_reward(x)
    assert not r.requires_grad and bool((r >= 0).all())
