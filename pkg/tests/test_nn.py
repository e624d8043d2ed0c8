import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from rfm import nn as rnn
from rfm.errors import ConfigError, DimensionError, NumericError, StateError

import _gradcheck


def linear_net(in_dim, out_dim):
    return rnn.Mlp(in_dim, out_dim, hidden=(), time_embed_dim=0)


def test_zero_weights_give_zero_output():
    net = rnn.build_mlp(2, 3, seed=0, hidden=(5,))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    out = rnn.forward(net, torch.randn(4, 2), 0.3)
    assert torch.equal(out, torch.zeros(4, 3))


def test_identity_linear_layer():
    net = linear_net(2, 2)
    with torch.no_grad():
        net.layers[0].weight.copy_(torch.eye(2))
        net.layers[0].bias.zero_()
    out = net(torch.tensor([[1.0, 2.0]]))
    assert torch.equal(out, torch.tensor([[1.0, 2.0]]))


def test_forward_is_deterministic_for_a_seed():
    a = rnn.build_mlp(3, 3, seed=7)
    b = rnn.build_mlp(3, 3, seed=7)
    x = torch.randn(5, 3, generator=torch.Generator().manual_seed(1))
    assert torch.equal(a(x, 0.4), b(x, 0.4))
    assert torch.equal(a(x, 0.4), a(x, 0.4))


def test_forward_rejects_bad_shapes():
    net = rnn.build_mlp(2, 2, seed=0)
    with pytest.raises(DimensionError):
        net(torch.randn(3, 5), 0.1)
    with pytest.raises(DimensionError):
        net(torch.randn(3, 2))  # missing t


def test_bad_architecture_is_a_config_error():
    with pytest.raises(ConfigError):
        rnn.Mlp(2, 2, hidden=(0,))
    with pytest.raises(ConfigError):
        rnn.Mlp(2, 2, activation="relu6")


def test_sum_loss_weight_gradient_is_outer_product():
    net = linear_net(3, 2)
    x = torch.tensor([[1.0, -2.0, 0.5]])
    grads = rnn.backward(net, net(x).sum())
    assert torch.allclose(grads[0], torch.ones(2, 1) @ x)
    assert torch.allclose(grads[1], torch.ones(2))


def test_constant_loss_gives_zero_gradients():
    net = rnn.build_mlp(2, 2, seed=0)
    grads = rnn.backward(net, torch.tensor(3.0))
    assert all(torch.equal(g, torch.zeros_like(g)) for g in grads)


def test_backward_without_forward_is_a_state_error():
    net = rnn.build_mlp(2, 2, seed=0)
    with pytest.raises(StateError):
        rnn.backward(net, torch.tensor(1.0, requires_grad=True))


@given(st.integers(0, 10_000))
def test_backward_matches_finite_differences(seed):
    assert _gradcheck.net_training_case(seed) < 1e-4


def test_adam_zero_gradient_leaves_params():
    net = rnn.build_mlp(2, 2, seed=0)
    before = [p.detach().clone() for p in net.parameters()]
    opt = rnn.Adam(net.parameters(), lr=1e-2)
    rnn.adam_step(opt, net, [torch.zeros_like(p) for p in net.parameters()])
    assert opt.step_count == 1
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_adam_constant_gradient_moves_against_sign():
    net = linear_net(1, 1)
    w0 = float(net.layers[0].weight.detach())
    opt = rnn.Adam(net.parameters(), lr=1e-2)
    g = [torch.full_like(p, 0.3) for p in net.parameters()]
    for _ in range(100):
        opt.step(g)
    assert float(net.layers[0].weight) < w0
    assert float(net.layers[0].weight) == pytest.approx(w0 - 1.0, abs=1e-6)


def test_adam_zero_lr_leaves_params():
    net = rnn.build_mlp(2, 2, seed=0)
    before = [p.detach().clone() for p in net.parameters()]
    opt = rnn.Adam(net.parameters(), lr=0.0)
    for _ in range(5):
        opt.step([torch.randn_like(p) for p in net.parameters()])
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_adam_rejects_non_finite_gradient():
    net = rnn.build_mlp(2, 2, seed=0)
    opt = rnn.Adam(net.parameters())
    bad = [torch.full_like(p, float("nan")) for p in net.parameters()]
    with pytest.raises(NumericError):
        opt.step(bad)


def test_adam_state_belongs_to_its_params():
    a, b = rnn.build_mlp(2, 2, seed=0), rnn.build_mlp(2, 2, seed=1)
    opt = rnn.Adam(a.parameters())
    with pytest.raises(StateError):
        rnn.adam_step(opt, b, [torch.zeros_like(p) for p in b.parameters()])


def test_checkpoint_roundtrip(tmp_path):
    net = rnn.build_mlp(2, 3, seed=5, hidden=(4, 4))
    digest = rnn.save_record(tmp_path / "n.json", {"net": rnn.net_record(net)})
    again = rnn.save_record(tmp_path / "m.json", {"net": rnn.net_record(net)})
    assert digest == again
    back = rnn.net_from_record(rnn.load_record(tmp_path / "n.json")["net"])
    assert rnn.params_digest(back) == rnn.params_digest(net)
    x = torch.randn(3, 2)
    assert torch.equal(back(x, 0.2), net(x, 0.2))


def test_unknown_format_version_rejected(tmp_path):
    (tmp_path / "x.json").write_text('{"format_version": 99}')
    with pytest.raises(ConfigError):
        rnn.load_record(tmp_path / "x.json")


@given(st.floats(0, 1), st.integers(2, 16).map(lambda w: 2 * w))
def test_time_embedding_is_bounded(t, width):
    e = rnn.sinusoidal_embedding(torch.tensor([t]), width)
    assert e.shape == (1, width)
    assert np.all(np.abs(e.numpy()) <= 1.0)


def test_adam_rebind_continues_the_moments():
    a, b = rnn.build_mlp(2, 2, seed=0), rnn.build_mlp(2, 2, seed=0)
    opt = rnn.Adam(a.parameters(), lr=1e-2)
    g = [torch.full_like(p, 0.3) for p in a.parameters()]
    opt.step(g)
    moved = opt.rebind(b.parameters())
    assert moved.step_count == 1 and moved.params[0] is next(b.parameters())
    assert all(torch.equal(x, y) for x, y in zip(moved.m, opt.m))
    moved.step(g)
    assert opt.step_count == 1  # the original is untouched
    with pytest.raises(StateError):
        opt.rebind(rnn.build_mlp(3, 2, seed=0).parameters())
