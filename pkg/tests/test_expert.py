import numpy as np
import pytest

from ekgnet.conv import ConvSpec, conv3d_forward
from ekgnet.errors import ShapeError
from ekgnet.expert import (ExpertConv3d, aggregate_kernels, dynamic_conv_forward,
                           dynamic_conv_per_sample_oracle, truncated_normal)
from ekgnet.tensor import Tensor, no_grad
from ekgnet.verify import dynamic_oracle, grad_check


def layer(spec, k, seed=0, **kw):
    lay = ExpertConv3d(spec, k, rng=np.random.default_rng(seed), dtype=np.float64, **kw)
    lay.bias.data[...] = np.random.default_rng(seed + 100).standard_normal(lay.bias.shape)
    return lay


def softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- init
def test_init_statistics_and_bound():
    spec = ConvSpec(40, 10, 5, groups=1)  # 10 * 40 * 125 = 5e4 weights per expert
    lay = ExpertConv3d(spec, 1, rng=np.random.default_rng(0), dtype=np.float64)
    w = lay.weight.data[0].ravel()[:10_000]
    std = np.sqrt(2.0 / spec.fan_in)
    assert abs(w.mean()) <= 3 * w.std(ddof=1) / np.sqrt(w.size)
    assert np.abs(lay.weight.data).max() <= 2 * std
    assert not lay.bias.data.any()


def test_init_deterministic():
    spec = ConvSpec(4, 4, 3, padding=1, groups=2)
    a = ExpertConv3d(spec, 4, rng=np.random.default_rng(5))
    b = ExpertConv3d(spec, 4, rng=np.random.default_rng(5))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_truncated_normal_bound():
    z = truncated_normal(np.random.default_rng(1), (20000,), 0.5)
    assert np.abs(z).max() <= 1.0


# ---------------------------------------------------------------- aggregation
def test_aggregate_one_hot_selects_expert():
    w = np.random.default_rng(2).standard_normal((3, 4, 2, 3, 3, 3))
    alpha = np.zeros((2, 3))
    alpha[:, 1] = 1.0
    agg, _ = aggregate_kernels(Tensor(alpha), Tensor(w))
    assert np.array_equal(agg.data, np.concatenate([w[1], w[1]]))


def test_aggregate_single_expert():
    w = np.random.default_rng(3).standard_normal((1, 2, 2, 1, 1, 1))
    agg, _ = aggregate_kernels(Tensor(np.ones((3, 1))), Tensor(w))
    assert np.array_equal(agg.data, np.concatenate([w[0]] * 3))


def test_aggregate_loop_oracle():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((3, 4, 2, 3, 3, 3))
    b = rng.standard_normal((3, 4))
    alpha = softmax_rows(rng.standard_normal((2, 3)))
    agg, bias = aggregate_kernels(Tensor(alpha), Tensor(w), Tensor(b))
    for s in range(2):
        ref_w = sum(alpha[s, k] * w[k] for k in range(3))
        ref_b = sum(alpha[s, k] * b[k] for k in range(3))
        np.testing.assert_allclose(agg.data[s * 4:(s + 1) * 4], ref_w, atol=1e-15)
        np.testing.assert_allclose(bias.data[s * 4:(s + 1) * 4], ref_b, atol=1e-15)


def test_aggregate_shape_errors():
    with pytest.raises(ShapeError):
        aggregate_kernels(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1, 1, 1, 1, 1))))


# ---------------------------------------------------------------- dynamic conv
def test_batch_of_one_is_static_conv():
    spec = ConvSpec(4, 4, 3, padding=1, groups=2)
    lay = layer(spec, 3)
    x = np.random.default_rng(5).standard_normal((1, 4, 3, 4, 3))
    alpha = np.array([[0.2, 0.5, 0.3]])
    with no_grad():
        got = lay.forward_with_alpha(Tensor(x), Tensor(alpha)).data
    w = np.tensordot(alpha[0], lay.weight.data, axes=1)
    b = alpha[0] @ lay.bias.data
    np.testing.assert_allclose(got, conv3d_forward(x, w, b, spec), atol=1e-13)


def test_uniform_alpha_uses_mean_kernel():
    spec = ConvSpec(2, 2, 3, padding=1)
    lay = layer(spec, 4)
    m = lay.mapping
    for blk in m.blocks:
        blk.gate.data[...] = 0.0
    m.proj.weight.data[...] = 0.0
    m.proj.bias.data[...] = 0.0
    x = np.random.default_rng(6).standard_normal((3, 2, 3, 3, 3))
    with no_grad():
        got = dynamic_conv_forward(Tensor(x), lay).data
    ref = conv3d_forward(x, lay.weight.data.mean(axis=0), lay.bias.data.mean(axis=0), spec)
    np.testing.assert_allclose(got, ref, atol=1e-13)


def test_random_case_matches_oracle():
    spec = ConvSpec(4, 6, 3, padding=1, groups=2)
    lay = layer(spec, 4)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 4, 4, 3, 4))
    alpha = softmax_rows(rng.standard_normal((3, 4)))
    with no_grad():
        got = lay.forward_with_alpha(Tensor(x), Tensor(alpha)).data
    ref = dynamic_conv_per_sample_oracle(x, alpha, lay.weight.data, lay.bias.data, spec)
    assert np.abs(got - ref).max() <= 1e-10


def test_oracle_one_hot_and_duplicates():
    spec = ConvSpec(2, 2, 3, padding=1)
    lay = layer(spec, 2)
    x = np.random.default_rng(8).standard_normal((1, 2, 3, 3, 3))
    x2 = np.concatenate([x, x])
    alpha = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = dynamic_conv_per_sample_oracle(x2, alpha, lay.weight.data, lay.bias.data, spec)
    assert np.array_equal(out[0], out[1])
    np.testing.assert_allclose(out[:1], conv3d_forward(x, lay.weight.data[1], lay.bias.data[1], spec), atol=1e-13)


def test_one_hot_is_bit_identical_to_static_conv():
    spec = ConvSpec(4, 4, 3, padding=1, groups=4)
    lay = layer(spec, 4)
    x = np.random.default_rng(9).standard_normal((3, 4, 4, 4, 4))
    for j in range(4):
        alpha = np.zeros((3, 4))
        alpha[:, j] = 1.0
        with no_grad():
            got = lay.forward_with_alpha(Tensor(x), Tensor(alpha)).data
        assert np.array_equal(got, conv3d_forward(x, lay.weight.data[j], lay.bias.data[j], spec))


def test_linear_in_alpha():
    spec = ConvSpec(2, 4, 3, padding=1, groups=2)
    lay = layer(spec, 3)
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))
    a1, a2 = softmax_rows(rng.standard_normal((2, 3))), softmax_rows(rng.standard_normal((2, 3)))
    lam = 0.3
    with no_grad():
        mix = lay.forward_with_alpha(x, Tensor(lam * a1 + (1 - lam) * a2)).data
        sep = lam * lay.forward_with_alpha(x, Tensor(a1)).data + (1 - lam) * lay.forward_with_alpha(x, Tensor(a2)).data
    np.testing.assert_allclose(mix, sep, atol=1e-12)


def test_batch_permutation_equivariance():
    spec = ConvSpec(4, 4, 3, padding=1, groups=2)
    lay = layer(spec, 4)
    lay.eval()  # batch statistics would couple samples in training mode
    x = np.random.default_rng(11).standard_normal((4, 4, 3, 3, 3))
    perm = np.array([2, 0, 3, 1])
    with no_grad():
        y = lay(Tensor(x)).data
        yp = lay(Tensor(x[perm])).data
    np.testing.assert_allclose(yp, y[perm], atol=1e-13)


def test_gradients_through_both_paths():
    spec = ConvSpec(4, 2, 3, padding=1, groups=2)
    lay = layer(spec, 2, tau_start=1.5)
    lay.mapping.tau = 1.5
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((3, 4, 3, 2, 3)), requires_grad=True)
    p = Tensor(rng.standard_normal((3, 2, 3, 2, 3)))
    rel, _ = grad_check(lambda: (lay(x) * p).sum(), [x] + lay.parameters())
    assert rel <= 1e-4


def test_equivalence_suite_fifty_draws():
    cases = dynamic_oracle(draws=50, seed=21)
    assert all(c.passed for c in cases)


def test_input_rank_error():
    lay = layer(ConvSpec(2, 2, 1), 2)
    with pytest.raises(ShapeError):
        lay(Tensor(np.zeros((2, 2, 3, 3))))
