import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from rfm import grid as G
from rfm.critics import CriticTrainConfig, critic_gradient_field, new_critic, train_critic
from rfm.data import GaussianMixture
from rfm.errors import ConfigError, DimensionError, UnsupportedModeError
from rfm.flow import new_flow_model, sample_ode
from rfm.operators import (CircuitNode, OperatorSpec, assemble_surrogate, canonical_divergence, clip_norm,
                           evaluate_circuit, interpolation_gradient, intersection_gradient, make_reward,
                           mixture_sampler, paper_lambda, union_gradient)

from _support import analytic_flow, gaussian_path_velocity


def gaussian_flow(mean, std=1.0):
    return analytic_flow(1, gaussian_path_velocity(mean, std))


def gaussian_path_score(mean, std, x, t):
    var = (1 - t) ** 2 + (t * std) ** 2
    return -(x - t * mean) / var


def test_divergence_tags():
    assert canonical_divergence("and") == "forward-kl"
    assert canonical_divergence("OR") == "reverse-kl"
    assert canonical_divergence("w1") == "w1"
    with pytest.raises(ConfigError):
        canonical_divergence("jensen-shannon")


def test_spec_validation():
    m1, m2 = new_flow_model(1, 0, hidden=(4,)), new_flow_model(2, 0, hidden=(4,))
    with pytest.raises(ConfigError):
        OperatorSpec([m1], ["and"], [0.0])
    with pytest.raises(ConfigError):
        OperatorSpec([m1], ["and", "and"], [1.0])
    with pytest.raises(DimensionError):
        OperatorSpec([m1, m2], ["and", "and"], [1.0, 1.0])
    with pytest.raises(ConfigError):
        OperatorSpec([m1], ["and"], [1.0], init_index=1)
    with pytest.raises(ConfigError):
        OperatorSpec([], [], [])


def test_intersection_with_itself_is_zero():
    m = new_flow_model(1, 3, hidden=(8,))
    x = torch.randn(20, 1)
    spec1 = OperatorSpec([m], ["and"], [1.0])
    assert torch.equal(intersection_gradient(m, spec1, x, 0.5), torch.zeros_like(x))
    spec2 = OperatorSpec([m.copy(), m.copy()], ["and", "and"], [0.3, 0.3])
    assert float(intersection_gradient(m, spec2, x, 0.7).abs().max()) < 1e-12


@given(st.floats(0.05, 0.95), st.floats(0.1, 2.0), st.floats(0.1, 2.0))
def test_intersection_matches_gaussian_scores(t, a1, a2):
    cur, p1, p2 = gaussian_flow(0.2, 1.3), gaussian_flow(-1.0), gaussian_flow(1.0, 0.7)
    spec = OperatorSpec([p1, p2], ["and", "and"], [a1, a2])
    x = torch.linspace(-3, 3, 9).reshape(-1, 1)
    got = intersection_gradient(cur, spec, x, t)
    ref = (-(a1 + a2) * gaussian_path_score(0.2, 1.3, x, t) + a1 * gaussian_path_score(-1.0, 1.0, x, t)
           + a2 * gaussian_path_score(1.0, 0.7, x, t))
    assert torch.allclose(got, ref, rtol=1e-9, atol=1e-9)


def test_union_flat_when_iterate_is_the_mixture():
    mix = GaussianMixture.build([[-1.0], [1.0]])
    c = train_critic(new_critic(1, "reverse-kl", seed=0), mix.sample, mix.sample,
                     CriticTrainConfig(steps=1000, lr=1e-3))
    m = new_flow_model(1, 0, hidden=(4,))
    spec = OperatorSpec([m, m], ["or", "or"], [0.5, 0.5])
    x = mix.sample(4000, torch.Generator().manual_seed(1))
    assert float(union_gradient({"mixture": c}, spec, x).norm(dim=-1).mean()) < 0.1


def test_union_of_identical_priors_is_that_prior():
    g = G.analytic_grid(GaussianMixture.gaussian(0.5, 0.8).logpdf, dim=1)
    target = G.closed_form_target(["reverse-kl", "reverse-kl"], [g, g], [1.0, 1.0])
    assert G.sup_norm(target, g) < 1e-12


def test_mixture_sampler_mean(priors):
    draw = mixture_sampler([priors["left"][0], priors["right"][0]], [1.0, 1.0])
    x = draw(4096, torch.Generator().manual_seed(0))
    assert abs(float(x.mean())) < 0.05


def test_per_prior_union_sums_fields():
    m = new_flow_model(1, 0, hidden=(4,))
    spec = OperatorSpec([m, m], ["or", "or"], [0.25, 0.75], union_mode="per-prior")
    cs = {i: new_critic(1, "reverse-kl", seed=i) for i in range(2)}
    for c in cs.values():
        c.steps_trained = 1
    x = torch.randn(6, 1)
    ref = -(0.25 * critic_gradient_field(cs[0], x) + 0.75 * critic_gradient_field(cs[1], x))
    assert torch.allclose(union_gradient(cs, spec, x), ref)


def test_interpolation_flat_at_the_prior():
    p = GaussianMixture.gaussian(-1.0, 1.0)
    c = train_critic(new_critic(1, "w1", seed=2), p.sample, p.sample, CriticTrainConfig(steps=1000, lr=1e-3))
    m = new_flow_model(1, 0, hidden=(4,))
    spec = OperatorSpec([m], ["w1"], [1.0])
    x = p.sample(4000, torch.Generator().manual_seed(3))
    assert float(interpolation_gradient({0: c}, spec, x).norm(dim=-1).mean()) < 0.15


def test_constant_critics_give_zero_interpolation_field():
    m = new_flow_model(1, 0, hidden=(4,))
    spec = OperatorSpec([m, m], ["w1", "w1"], [1.0, 2.0])
    cs = {}
    for i in range(2):
        c = new_critic(1, "w1", seed=i)
        with torch.no_grad():
            for p in c.net.parameters():
                p.zero_()
        c.steps_trained = 1
        cs[i] = c
    assert torch.equal(interpolation_gradient(cs, spec, torch.randn(5, 1)), torch.zeros(5, 1))


def test_reward_only_surrogate_is_the_reward_gradient():
    r = make_reward("coordinate-linear", axis=1, scale=2.0)
    spec = OperatorSpec([], [], [], reward=r)
    s = assemble_surrogate(new_flow_model(2, 0, hidden=(4,)), spec)
    x = torch.randn(5, 2)
    assert torch.equal(s.terminal(x), r.grad(x))
    assert s.running is None


@pytest.mark.parametrize("mode", ["terminal", "flow-process"])
def test_zero_reward_single_prior_gives_zero_fields(mode):
    m = new_flow_model(1, 0, hidden=(8,))
    spec = OperatorSpec([m], ["and"], [1.0])
    s = assemble_surrogate(m, spec, mode=mode)
    x = torch.randn(7, 1)
    assert torch.equal(s.terminal(x), torch.zeros_like(x))
    if s.running is not None:
        assert torch.equal(s.running(x, torch.full((7,), 0.4)), torch.zeros_like(x))


def test_reward_guided_intersection_terminal_field():
    a, b = new_flow_model(2, 1, hidden=(8,)), new_flow_model(2, 2, hidden=(8,))
    r = make_reward("coordinate-linear", axis=1, scale=1.0)
    spec = OperatorSpec([a, b], ["and", "and"], [0.1, 0.1], reward=r, terminal_eps=0.2)
    cur = a.copy()
    s = assemble_surrogate(cur, spec)
    x = torch.randn(9, 2)
    inter = intersection_gradient(cur, spec, x, 0.8)
    assert torch.allclose(s.terminal(x) - inter, torch.tensor([0.0, 1.0]).expand(9, 2))


def test_flow_process_surrogate_uses_lambda():
    a, b = new_flow_model(1, 1, hidden=(8,)), new_flow_model(1, 2, hidden=(8,))
    spec = OperatorSpec([a, b], ["and", "and"], [0.5, 0.5], lam=paper_lambda)
    s = assemble_surrogate(a, spec, mode="flow-process")
    x = torch.randn(4, 1)
    ref = paper_lambda(1.0) * intersection_gradient(a, spec, x, 1 - spec.terminal_eps)
    assert torch.allclose(s.terminal(x), ref)
    assert torch.allclose(s.running(x, torch.full((4,), 0.3)), intersection_gradient(a, spec, x, 0.3))
    assert s.lam(0.99) == 0.2 and s.lam(0.5) == 0.4


def test_flow_process_rejects_critic_divergences():
    m = new_flow_model(1, 0, hidden=(4,))
    with pytest.raises(UnsupportedModeError):
        assemble_surrogate(m, OperatorSpec([m, m], ["or", "or"], [1, 1]), mode="flow-process")
    with pytest.raises(ConfigError):
        assemble_surrogate(m, OperatorSpec([m], ["and"], [1]), mode="sideways")


def test_reward_registry():
    with pytest.raises(ConfigError):
        make_reward("log-barrier")
    with pytest.raises(ConfigError):
        make_reward("coordinate-linear", centre=1)
    well = make_reward("negative-quadratic-well", center=[1.0, 0.0], scale=0.5)
    assert float(well.value(np.array([[1.0, 0.0]]))[0]) == 0.0


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.floats(0.1, 2.0))
def test_reward_gradients_match_values(point, scale):
    for r in (make_reward("coordinate-linear", axis=0, scale=scale),
              make_reward("negative-quadratic-well", center=[0.5, -0.5], scale=scale)):
        x = torch.tensor([point], dtype=torch.float64, requires_grad=True)
        (g,) = torch.autograd.grad(r.value(x).sum(), x)
        assert torch.allclose(r.grad(x.detach()), g)
        assert np.isclose(float(r.value(x.detach().numpy())[0]), float(r.value(x.detach())[0]))


@given(st.integers(1, 4), st.floats(0.01, 10.0), st.integers(0, 1000))
def test_clip_norm_caps_and_keeps_direction(d, cap, seed):
    v = torch.randn(16, d, generator=torch.Generator().manual_seed(seed)) * 5
    out = clip_norm(v, cap)
    assert bool((out.norm(dim=-1) <= cap * (1 + 1e-12)).all())
    cos = (out * v).sum(-1) / (out.norm(dim=-1) * v.norm(dim=-1))
    assert torch.allclose(cos, torch.ones(16))
    assert torch.equal(clip_norm(v, None), v)


def test_single_leaf_circuit_is_unchanged():
    m = new_flow_model(1, 0, hidden=(4,))
    assert evaluate_circuit(CircuitNode("leaf", model=m), None) is m


def test_circuit_validation():
    m = new_flow_model(1, 0, hidden=(4,))
    with pytest.raises(ConfigError):
        CircuitNode("bad")
    leaf = CircuitNode("a", model=m)
    node = CircuitNode("n", children=[leaf, leaf], divergences=["and", "and"], alphas=[1, 1])
    with pytest.raises(ConfigError, match="same child"):
        evaluate_circuit(node, None)


def test_circuit_errors_name_the_node():
    m = new_flow_model(1, 0, hidden=(4,))
    bad = CircuitNode("inner", children=[CircuitNode("a", model=m), CircuitNode("b", model=m.copy())],
                      divergences=["and", "and"], alphas=[1.0, -1.0])
    root = CircuitNode("root", children=[bad, CircuitNode("c", model=m.copy())], divergences=["and", "and"],
                       alphas=[1, 1])
    with pytest.raises(ConfigError, match="root/inner"):
        evaluate_circuit(root, None)


def test_intersection_of_identical_leaves_keeps_the_leaf(priors):
    from rfm.driver import RfmConfig
    from rfm.finetune import FineTuneConfig
    model, gm = priors["bimodal"]
    cfg = RfmConfig(K=1, gamma=0.5, finetune=FineTuneConfig(steps=5, m=32), eval_backend=None)
    node = CircuitNode("and", children=[CircuitNode("a", model=model), CircuitNode("b", model=model.copy())],
                       divergences=["and", "and"], alphas=[0.5, 0.5], options={"terminal_eps": 0.2})
    out = evaluate_circuit(node, cfg)
    x = sample_ode(out, 16384, seed=0).numpy()
    assert G.sample_kl(x, G.analytic_grid(gm.logpdf, dim=1)) < 0.05


def test_assembled_fields_are_finite_on_trajectory_states(priors):
    from rfm.finetune import _interior
    from rfm.flow import sample_sde_memoryless
    left, right = priors["left"][0], priors["right"][0]
    spec = OperatorSpec([left, right], ["and", "and"], [0.5, 0.5], reward=make_reward("coordinate-linear", axis=0))
    traj = sample_sde_memoryless(left, 64, 0.01, seed=0)
    for mode in ("terminal", "flow-process"):
        sur = assemble_surrogate(left, spec, mode=mode)
        term = sur.terminal(traj.terminal)
        assert float(torch.isfinite(term).all(-1).double().mean()) >= 0.999
        if sur.running is not None:
            x, t = _interior(traj)
            run = sur.running(x, t)
            assert float(torch.isfinite(run).all(-1).double().mean()) >= 0.999
