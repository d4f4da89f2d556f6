import math

import numpy as np
import pytest

from ekgnet.errors import ParameterError, StateError
from ekgnet.mapping import (MappingNetwork, attention_weights, extract_context, hidden_width,
                            mapping_forward, temperature_at, update_temperature)
from ekgnet.tensor import Tensor, no_grad
from ekgnet.verify import grad_check

# 40-digit mpmath exp-normalize of (1, 2, 3) / 2
SOFTMAX_123_TAU2 = (0.1863237232258475770238007, 0.3071958857184983970731571, 0.5064803910556540259030421)


def net(c=8, k=4, seed=0, **kw):
    return MappingNetwork(c, k, rng=np.random.default_rng(seed), dtype=np.float64, **kw)


def test_context_constant_and_impulse():
    x = np.full((2, 3, 2, 3, 4), 1.25)
    assert np.array_equal(extract_context(Tensor(x)).data, np.full((2, 3, 1, 1, 1), 1.25))
    imp = np.zeros((1, 1, 2, 2, 2))
    imp[0, 0, 1, 0, 1] = 1.0
    assert extract_context(Tensor(imp)).data.item() == 1 / 8


def test_hidden_width():
    assert hidden_width(64, 4) == 4
    assert hidden_width(256, 4) == 16
    assert hidden_width(32, 8) == 8


def test_annihilated_network_gives_uniform_alpha():
    m = net()
    for b in m.blocks:
        b.gate.data[...] = 0.0
    m.proj.weight.data[...] = 0.0
    m.proj.bias.data[...] = 0.0
    x = Tensor(np.random.default_rng(1).standard_normal((3, 8, 2, 3, 2)))
    g = extract_context(x)
    assert not mapping_forward(g, m).data.any()
    assert np.array_equal(m(x).data, np.full((3, 4), 0.25))


def test_zero_blocks_is_conv_of_bn():
    m = net(num_blocks=0)
    m.eval()
    m.final_bn.running_mean[...] = [0.1 * i for i in range(8)]
    g = Tensor(np.random.default_rng(2).standard_normal((2, 8, 1, 1, 1)))
    u = (g.data[:, :, 0, 0, 0] - m.final_bn.running_mean) / np.sqrt(m.final_bn.running_var + 1e-5)
    ref = u @ m.proj.weight.data.reshape(4, 8).T + m.proj.bias.data
    np.testing.assert_allclose(mapping_forward(g, m).data, ref, atol=1e-14)


def _scalar_gelu(v):
    return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))


def test_logits_match_scalar_evaluation():
    rng = np.random.default_rng(3)
    m = net(c=4, k=4, seed=4)
    m.eval()
    for mod in m.modules():
        if hasattr(mod, "running_mean"):
            mod.running_mean[...] = rng.standard_normal(mod.running_mean.shape) * 0.3
            mod.running_var[...] = rng.uniform(0.5, 2.0, mod.running_var.shape)
            mod.weight.data[...] = rng.uniform(0.5, 1.5, mod.weight.shape)
            mod.bias.data[...] = rng.standard_normal(mod.bias.shape) * 0.1
    g = rng.standard_normal(4)

    def bn(vals, mod):
        return [(v - mod.running_mean[i]) / math.sqrt(mod.running_var[i] + 1e-5) * mod.weight.data[i]
                + mod.bias.data[i] for i, v in enumerate(vals)]

    def conv1(vals, conv):
        w = conv.weight.data.reshape(conv.weight.shape[0], -1)
        return [sum(w[o, i] * vals[i] for i in range(len(vals))) + conv.bias.data[o] for o in range(w.shape[0])]

    h = list(g)
    for blk in m.blocks:
        r = conv1([_scalar_gelu(v) for v in bn(h, blk.bn)], blk.conv)
        h = [hv + blk.gate.data[0] * rv for hv, rv in zip(h, r)]
    expected = conv1(bn(h, m.final_bn), m.proj)
    got = mapping_forward(Tensor(g.reshape(1, 4, 1, 1, 1)), m).data[0]
    np.testing.assert_allclose(got, expected, atol=1e-13)


def test_attention_weights_cases():
    assert np.array_equal(attention_weights(Tensor(np.full((2, 4), 0.7)), 3.0).data, np.full((2, 4), 0.25))
    sat = attention_weights(Tensor([[20.0, 0.0, 0.0]]), 1.0).data
    assert sat.max() >= 1 - 1e-8
    np.testing.assert_allclose(attention_weights(Tensor([[1.0, 2.0, 3.0]]), 2.0).data[0],
                               SOFTMAX_123_TAU2, rtol=1e-14)


def test_temperature_schedule():
    assert temperature_at(0) == 30.0
    assert temperature_at(5) == 15.5
    assert temperature_at(10) == 1.0
    assert temperature_at(400) == 1.0
    with pytest.raises(ParameterError):
        temperature_at(-1)
    m = net()
    assert update_temperature(m, 5) == 15.5 and m.tau == 15.5


def test_alpha_rows_and_tau_invariance():
    m = net()
    x = Tensor(np.random.default_rng(5).standard_normal((5, 8, 2, 2, 3)))
    with no_grad():
        logits = m.logits(extract_context(x)).data
        picks = []
        for tau in (0.5, 1.0, 30.0):
            m.tau = tau
            a = m(x).data
            assert (a > 0).all()
            np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
            picks.append(a.argmax(axis=1))
    assert all(np.array_equal(p, logits.argmax(axis=1)) for p in picks)


def test_alpha_depends_only_on_channel_means():
    m = net()
    rng = np.random.default_rng(6)
    x1 = rng.standard_normal((2, 8, 2, 2, 2))
    x2 = rng.standard_normal((2, 8, 2, 2, 2))
    x2 += x1.mean(axis=(2, 3, 4), keepdims=True) - x2.mean(axis=(2, 3, 4), keepdims=True)
    m.eval()
    np.testing.assert_allclose(m(Tensor(x1)).data, m(Tensor(x2)).data, atol=1e-14)


def test_gate_gradient():
    m = net(tau_start=2.0)
    x = Tensor(np.random.default_rng(7).standard_normal((4, 8, 2, 2, 2)))
    p = Tensor(np.random.default_rng(8).standard_normal((4, 4)))
    rel, _ = grad_check(lambda: (m(x) * p).sum(), [b.gate for b in m.blocks])
    assert rel <= 1e-4


def test_uninitialized_network_raises():
    m = MappingNetwork(8, 4)
    with pytest.raises(StateError):
        m(Tensor(np.zeros((1, 8, 1, 1, 1))))
    m.reset_parameters(np.random.default_rng(0))
    assert m(Tensor(np.zeros((1, 8, 1, 1, 1)), dtype=np.float32)).shape == (1, 4)


def test_invalid_schedule():
    with pytest.raises(ParameterError):
        MappingNetwork(8, 4, tau_start=1.0, tau_end=2.0)
    with pytest.raises(ParameterError):
        net().tau = 0.0


def test_tau_is_a_checkpointed_buffer():
    m = net()
    m.tau = 7.5
    state = m.state_dict()
    other = net(seed=9)
    other.load_state_dict(state)
    assert other.tau == 7.5
