"""Expert kernel convolution.

A layer holds ``K`` base kernels.  For each sample the attached
:class:`~ekgnet.mapping.MappingNetwork` produces mixing weights ``alpha``;
the per-sample kernel is ``sum_k alpha[b, k] * W_k``.  All samples are then
convolved in a single call by folding the batch into the channel axis and
using ``groups * B`` groups.
"""
from __future__ import annotations

import numpy as np

from .conv import ConvSpec, conv3d, conv3d_naive
from .errors import ShapeError
from .mapping import MappingNetwork
from .module import Module
from .tensor import Parameter, Tensor, matmul


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples with every |z| > ``bound`` redrawn."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


class ExpertConv3d(Module):
    def __init__(self, spec: ConvSpec, num_experts: int = 4, *, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 mapping: MappingNetwork | None = None, **mapping_kwargs):
        if num_experts < 1:
            raise ShapeError("num_experts must be >= 1")
        self.spec = spec
        self.num_experts = num_experts
        self.weight = Parameter(np.zeros((num_experts,) + spec.weight_shape, dtype=dtype))
        self.bias = Parameter(np.zeros((num_experts, spec.out_channels), dtype=dtype)) if bias else None
        if mapping is None:
            mapping = MappingNetwork(spec.in_channels, num_experts, rng=rng, dtype=dtype, **mapping_kwargs)
        if mapping.num_experts != num_experts:
            raise ShapeError(f"mapping network emits {mapping.num_experts} weights for {num_experts} experts")
        self.mapping = mapping
        if rng is not None:
            self.init_expert_kernels(rng)

    def _children(self):
        # stable checkpoint section names
        yield "experts.weight", self.weight
        if self.bias is not None:
            yield "experts.bias", self.bias
        yield "mapping", self.mapping

    def init_expert_kernels(self, rng) -> None:
        """Truncated-normal (±2 std) He init of every expert; biases zeroed."""
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(int(rng))
        std = np.sqrt(2.0 / self.spec.fan_in)
        self.weight.data[...] = truncated_normal(rng, self.weight.shape, std)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_alpha(x, self.mapping(x))

    def forward_with_alpha(self, x: Tensor, alpha: Tensor) -> Tensor:
        """Dynamic convolution with externally supplied mixing weights (B×K)."""
        if x.ndim != 5:
            raise ShapeError(f"expected B×C×D×H×W input, got shape {x.shape}")
        bsz = x.shape[0]
        spec = self.spec
        w_dyn, b_dyn = aggregate_kernels(alpha, self.weight, self.bias)
        merged = spec.with_groups(spec.groups * bsz, spec.in_channels * bsz, spec.out_channels * bsz)
        xm = x.reshape((1, bsz * spec.in_channels) + x.shape[2:])
        y = conv3d(xm, w_dyn, b_dyn, merged)
        return y.reshape((bsz, spec.out_channels) + y.shape[2:])


def aggregate_kernels(alpha: Tensor, weight: Tensor, bias: Tensor | None = None):
    """Mix expert kernels per sample with one matmul.

    Returns the ``(B*C_out)×(C_in/G)×S×S×S`` kernel stack and, when ``bias``
    is given, the flattened ``B*C_out`` bias.
    """
    k = weight.shape[0]
    if alpha.ndim != 2 or alpha.shape[1] != k:
        raise ShapeError(f"alpha shape {alpha.shape} does not match {k} experts")
    bsz = alpha.shape[0]
    c_out = weight.shape[1]
    w = matmul(alpha, weight.reshape(k, -1)).reshape((bsz * c_out,) + weight.shape[2:])
    if bias is None:
        return w, None
    if bias.shape[0] != k:
        raise ShapeError(f"bias has {bias.shape[0]} experts, alpha has {k}")
    return w, matmul(alpha, bias).reshape(bsz * c_out)


def dynamic_conv_forward(x: Tensor, params: ExpertConv3d) -> Tensor:
    return params(x)


def dynamic_conv_per_sample_oracle(x, alpha, weight, bias, spec: ConvSpec) -> np.ndarray:
    """Reference: build each sample's kernel by explicit summation and run the
    naive convolution on that sample alone."""
    x = np.asarray(x, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = None if bias is None else np.asarray(bias, dtype=np.float64)
    outs = []
    for b in range(x.shape[0]):
        w_b = np.zeros(weight.shape[1:])
        b_b = None if bias is None else np.zeros(bias.shape[1:])
        for k in range(weight.shape[0]):
            w_b += alpha[b, k] * weight[k]
            if bias is not None:
                b_b += alpha[b, k] * bias[k]
        outs.append(conv3d_naive(x[b:b + 1], w_b, b_b, spec)[0])
    return np.stack(outs)
