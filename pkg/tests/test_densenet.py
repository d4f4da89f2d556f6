import numpy as np
import pytest

from ekgnet import functional as F
from ekgnet.conv import ConvSpec, conv3d_forward
from ekgnet.densenet import (ArchConfig, DenseLayer, EKGNet, build_model, cross_block_downsample,
                             dense_layer_forward, growth_rate, model_forward)
from ekgnet.errors import ConfigError, ParameterError, ShapeError
from ekgnet.expert import aggregate_kernels
from ekgnet.tensor import Tensor, no_grad
from ekgnet.verify import grad_check


def test_growth_rate_values():
    assert growth_rate(1, 8) == 8
    assert growth_rate(3, 8) == 32
    assert growth_rate(1, 1) == 1
    with pytest.raises(ParameterError):
        growth_rate(0, 8)


def test_default_growth_sequence():
    assert ArchConfig().growth_rates == (8, 16, 32)


def test_inconsistent_growth_rates_rejected():
    with pytest.raises(ConfigError):
        ArchConfig(stages=(1, 1), growth_rates=(8, 8))
    with pytest.raises(ConfigError):
        ArchConfig(stages=(0,))


def _mapping_params(c, k, r=16, blocks=2):
    h = max(c // r, k)
    total, width = 0, c
    for _ in range(blocks):
        total += 2 * width + width * h + h + 1 + (width * h if width != h else 0)
        width = h
    return total + 2 * width + width * k + k


def closed_form_single_layer(k0, classes, experts=4, groups=4, bottleneck=4):
    stem = 2 * k0
    k = k0
    mid = bottleneck * k
    layer = (2 * stem + stem * mid + 2 * mid
             + experts * (k * (mid // groups) * 27) + experts * k
             + _mapping_params(mid, experts))
    feats = stem + k
    return 27 * stem + stem + layer + 2 * feats + feats * classes + classes


def test_single_layer_parameter_count():
    cfg = ArchConfig(stages=(1,), k0=8, num_classes=5, patch=(5, 5, 6))
    model = build_model(cfg, 0)
    assert model.num_parameters() == closed_form_single_layer(8, 5)
    assert sum(p.size for _, p in model.named_parameters()) == model.num_parameters()


def test_default_config_builds_with_consistent_links():
    model = EKGNet(ArchConfig(), 0)
    sources = {"stem": 16}
    for m, layers in enumerate(model.blocks):
        links = [lk for lk in model.link_table if lk.target_block == m]
        assert layers[0].in_channels == sum(lk.channels for lk in links)
        sources[f"block{m}"] = sum(l.growth for l in layers)
    assert [lk.factor for lk in model.link_table if lk.target_block == 2] == [1, 4, 4, 2]


def test_doubling_k0_doubles_growth_and_stem():
    a = EKGNet(ArchConfig(stages=(1, 1), k0=4, patch=(5, 5, 6), num_classes=3), 0)
    b = EKGNet(ArchConfig(stages=(1, 1), k0=8, patch=(5, 5, 6), num_classes=3), 0)
    assert b.cfg.growth_rates == tuple(2 * g for g in a.cfg.growth_rates)
    assert b.stem.weight.shape[0] == 2 * a.stem.weight.shape[0]


def micro(dtype="float64", seed=0, **kw):
    cfg = dict(stages=(1, 1), k0=2, groups=2, experts=2, num_classes=3, patch=(5, 5, 6), dtype=dtype)
    cfg.update(kw)
    return build_model(ArchConfig(**cfg), seed)


# ---------------------------------------------------------------- dense layer
def _layer(in_ch=6, k=4, seed=0):
    cfg = ArchConfig(stages=(1,), k0=k, groups=2, experts=2, num_classes=3, dtype="float64")
    return DenseLayer(in_ch, k, cfg, np.random.default_rng(seed))


def test_zeroed_expert_conv_appends_zero_features():
    lay = _layer()
    lay.conv2.weight.data[...] = 0.0
    lay.conv2.bias.data[...] = 0.0
    out = dense_layer_forward(Tensor(np.random.default_rng(1).standard_normal((2, 6, 3, 3, 3))), lay)
    assert out.shape == (2, 4, 3, 3, 3) and not out.data.any()


def test_dense_layer_compositional_oracle():
    lay = _layer()
    x = np.random.default_rng(2).standard_normal((1, 6, 7, 7, 8))
    with no_grad():
        got = lay(Tensor(x)).data

        def bn(h, mod):
            return F.batch_norm(Tensor(h), mod.weight, mod.bias, F.BatchNormState(h.shape[1], dtype=np.float64),
                                True).data

        h = F.gelu(Tensor(bn(x, lay.bn1))).data
        h = conv3d_forward(h, lay.conv1.weight.data, None, lay.conv1.spec)
        h = F.gelu(Tensor(bn(h, lay.bn2))).data
        alpha = lay.conv2.mapping(Tensor(h)).data
        w, b = aggregate_kernels(Tensor(alpha), lay.conv2.weight, lay.conv2.bias)
        ref = conv3d_forward(h, w.data, b.data, lay.conv2.spec)
    assert got.shape == (1, 4, 7, 7, 8)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_zero_valued_link_contributes_only_through_its_channels():
    full = _layer(in_ch=6, seed=3)
    cut = _layer(in_ch=4, seed=3)
    state = full.state_dict()
    for name, arr in cut.state_dict().items():
        src = state[name]
        if src.shape != arr.shape:
            src = src[:, :4] if src.ndim > 1 else src[:4]
        cut.load_state_dict({**cut.state_dict(), name: src})
    x = np.random.default_rng(4).standard_normal((2, 4, 3, 3, 3))
    xz = np.concatenate([x, np.zeros((2, 2, 3, 3, 3))], axis=1)
    with no_grad():
        np.testing.assert_allclose(full(Tensor(xz)).data, cut(Tensor(x)).data, atol=1e-12)


def test_dense_layer_channel_check():
    with pytest.raises(ShapeError):
        _layer()(Tensor(np.zeros((1, 5, 3, 3, 3))))


# ---------------------------------------------------------------- downsampling
def test_downsample_identity_and_constant():
    x = Tensor(np.random.default_rng(5).standard_normal((1, 2, 3, 4, 5)))
    assert cross_block_downsample(x, 1) is x
    c = cross_block_downsample(Tensor(np.full((1, 1, 5, 4, 3), 2.5)), 2).data
    assert c.shape == (1, 1, 3, 2, 2) and np.all(c == 2.5)


def test_downsample_ramp_loop_oracle():
    x = np.arange(64, dtype=float).reshape(1, 1, 4, 4, 4)
    out = cross_block_downsample(Tensor(x), 2).data
    for a in range(2):
        for b in range(2):
            for c in range(2):
                vals = [x[0, 0, 2 * a + i, 2 * b + j, 2 * c + k] for i in range(2) for j in range(2) for k in range(2)]
                assert out[0, 0, a, b, c] == sum(vals) / 8


# ---------------------------------------------------------------- model
def test_logits_shape_and_input_check():
    model = micro()
    out = model_forward(model, Tensor(np.random.default_rng(6).standard_normal((4, 1, 6, 5, 5))))
    assert out.shape == (4, 3)
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 1, 6, 5, 4))))


def test_identical_samples_identical_rows_in_eval():
    model = micro()
    model.eval()
    x = np.random.default_rng(7).standard_normal((1, 1, 6, 5, 5))
    with no_grad():
        out = model(Tensor(np.concatenate([x, x, x]))).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


@pytest.mark.parametrize("seed", range(3))
def test_batch_permutation_permutes_logits(seed):
    model = micro(seed=seed)
    model.eval()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 1, 6, 5, 5))
    perm = rng.permutation(5)
    with no_grad():
        np.testing.assert_allclose(model(Tensor(x[perm])).data, model(Tensor(x)).data[perm], atol=1e-12)


def test_micro_model_gradient_check():
    model = micro()
    model.set_temperature(1.0)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 1, 6, 5, 5))
    y = np.array([0, 2, 1])
    rel, _ = grad_check(lambda: F.cross_entropy(model(Tensor(x)), y), model.parameters(), max_entries=10)
    assert rel <= 1e-3


def test_float32_input_cast():
    model = micro(dtype="float32")
    out = model(Tensor(np.zeros((1, 1, 6, 5, 5)), dtype=np.float64))
    assert out.dtype == np.float32


def test_state_dict_round_trip_and_determinism():
    a, b = micro(seed=3), micro(seed=3)
    for (na, va), (nb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and np.array_equal(va, vb)
    c = micro(seed=4)
    c.load_state_dict(a.state_dict())
    x = Tensor(np.random.default_rng(9).standard_normal((2, 1, 6, 5, 5)))
    a.eval(), c.eval()
    with no_grad():
        assert np.array_equal(a(x).data, c(x).data)
