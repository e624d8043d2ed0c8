import math

import pytest
import torch
from hypothesis import given, strategies as st

from rfm.critics import (CriticTrainConfig, critic_gradient_field, estimate_objective, fgan_reverse_kl_objective,
                         new_critic, train_critic, train_reverse_kl_critic, train_w1_critic, w1_critic_objective)
from rfm.data import GaussianMixture
from rfm.errors import ConfigError, StateError

import _gradcheck

P1 = GaussianMixture.gaussian(1.0, 1.0)
P0 = GaussianMixture.gaussian(0.0, 1.0)
PM = GaussianMixture.gaussian(-1.0, 1.0)
TRAIN = CriticTrainConfig(steps=1000, batch=256, lr=1e-3)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def set_constant(critic, value):
    with torch.no_grad():
        for p in critic.net.parameters():
            p.zero_()
        critic.net.layers[-1].bias.fill_(value)


def set_linear(critic):
    """phi(x) = x for a 1D critic with no hidden layers."""
    with torch.no_grad():
        critic.net.layers[0].weight.fill_(1.0)
        critic.net.layers[0].bias.zero_()


def test_constant_one_critic_objective_is_zero():
    c = new_critic(2, "reverse-kl", seed=0)
    set_constant(c, 1.0)
    p, q = torch.randn(100, 2), torch.randn(50, 2) + 3
    assert float(fgan_reverse_kl_objective(c, p, q).detach()) == pytest.approx(0.0, abs=1e-12)


def test_self_divergence_reverse_kl():
    c = train_reverse_kl_critic(new_critic(1, "reverse-kl", seed=1), P0.sample, P0.sample, TRAIN)
    g = gen(5)
    x = P0.sample(20000, g)
    assert abs(estimate_objective(c, x, P0.sample(20000, g))) < 0.02
    assert float(critic_gradient_field(c, x[:4000]).norm(dim=-1).mean()) < 0.1


def test_gaussian_kl_estimate():
    c = train_reverse_kl_critic(new_critic(1, "reverse-kl", seed=1), P1.sample, P0.sample, TRAIN)
    g = gen(6)
    est = estimate_objective(c, P1.sample(20000, g), P0.sample(20000, g))
    assert 0.4 <= est <= 0.6
    assert abs(est - 0.5) < 0.1


def test_zero_steps_leave_critic_unchanged():
    c = new_critic(1, "reverse-kl", seed=3)
    before = [p.detach().clone() for p in c.net.parameters()]
    train_critic(c, P0.sample, P1.sample, CriticTrainConfig(steps=0))
    assert all(torch.equal(a, b) for a, b in zip(before, c.net.parameters()))
    assert c.steps_trained == 0


def test_w1_constant_critic_objective_is_zero():
    c = new_critic(1, "w1", seed=0)
    set_constant(c, 2.5)
    p, q = torch.randn(64, 1), torch.randn(64, 1) + 1
    assert float(w1_critic_objective(c, p, q, gp=0.0).detach()) == pytest.approx(0.0, abs=1e-12)


def test_w1_self_distance_and_translation():
    g = gen(7)
    same = train_w1_critic(new_critic(1, "w1", seed=2), PM.sample, PM.sample, TRAIN)
    a = PM.sample(20000, g)
    assert abs(estimate_objective(same, a, PM.sample(20000, g))) < 0.05
    moved = train_w1_critic(new_critic(1, "w1", seed=1), PM.sample, P1.sample, TRAIN)
    assert abs(estimate_objective(moved, PM.sample(20000, g), P1.sample(20000, g)) - 2.0) < 0.3


def test_two_sided_penalty_is_available():
    c = new_critic(1, "w1", seed=4)
    cfg = CriticTrainConfig(steps=5, penalty="two-sided")
    train_w1_critic(c, PM.sample, P1.sample, cfg)
    assert c.steps_trained == 5
    with pytest.raises(ConfigError):
        CriticTrainConfig(penalty="sideways")


def test_constant_critic_has_zero_field():
    c = new_critic(2, "reverse-kl", seed=0)
    set_constant(c, 0.7)
    assert torch.equal(critic_gradient_field(c, torch.randn(5, 2)), torch.zeros(5, 2))


def test_linear_critic_fields():
    c = new_critic(1, "reverse-kl", seed=0, hidden=())
    set_linear(c)
    f = critic_gradient_field(c, torch.zeros(1, 1))
    assert float(f) == pytest.approx(-math.exp(-1), abs=1e-12)
    w = new_critic(1, "w1", seed=0, hidden=())
    set_linear(w)
    assert torch.equal(critic_gradient_field(w, torch.randn(7, 1)), -torch.ones(7, 1))


@given(st.integers(0, 10_000))
def test_critic_field_matches_finite_differences(seed):
    assert _gradcheck.critic_field_case(seed) < 1e-4


def test_training_is_warm_started_and_deterministic():
    a = new_critic(1, "w1", seed=9)
    b = new_critic(1, "w1", seed=9)
    for c in (a, b):
        train_w1_critic(c, PM.sample, P1.sample, CriticTrainConfig(steps=10), seed=3)
        train_w1_critic(c, PM.sample, P1.sample, CriticTrainConfig(steps=10), seed=3)
    assert a.steps_trained == 20
    assert a.optimizer.step_count == 20
    assert all(torch.equal(x, y) for x, y in zip(a.net.parameters(), b.net.parameters()))


def test_kind_mismatch_and_unknown_kind():
    with pytest.raises(ConfigError):
        train_w1_critic(new_critic(1, "reverse-kl", seed=0), P0.sample, P0.sample, TRAIN)
    with pytest.raises(ConfigError):
        new_critic(1, "hellinger", seed=0)


def test_empty_samples_rejected():
    c = new_critic(1, "reverse-kl", seed=0)
    with pytest.raises(ConfigError):
        fgan_reverse_kl_objective(c, torch.zeros(0, 1), torch.zeros(3, 1))


def test_critic_checkpoint_roundtrip(tmp_path):
    c = new_critic(2, "w1", seed=1, hidden=(8,))
    c.save(tmp_path / "c.json")
    back = type(c).load(tmp_path / "c.json")
    x = torch.randn(4, 2)
    assert torch.equal(back(x), c(x))
    assert back.kind == "w1"


def test_untrained_critic_cannot_drive_a_union():
    from rfm.operators import OperatorSpec, union_gradient
    from rfm.flow import new_flow_model
    m = new_flow_model(1, seed=0, hidden=(4,))
    spec = OperatorSpec([m, m], ["or", "or"], [1, 1])
    with pytest.raises(StateError):
        union_gradient({"mixture": new_critic(1, "reverse-kl", seed=0)}, spec, torch.zeros(2, 1))


def test_w1_critic_is_near_one_lipschitz_between_separated_gaussians():
    from rfm.critics import gradient_penalty
    c = train_w1_critic(new_critic(1, "w1", seed=5), PM.sample, P1.sample, TRAIN)
    g = gen(8)
    _, norms = gradient_penalty(c, PM.sample(4096, g), P1.sample(4096, g), g)
    assert 0.8 <= float(norms.detach().mean()) <= 1.2
