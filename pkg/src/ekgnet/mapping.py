"""Context mapping network: global context -> per-sample expert attention.

    g       = global average of the input over D, H, W
    h_0     = g
    h_{i+1} = skip_i(h_i) + gate_i * Conv1(GELU(BN(h_i)))
    logits  = Conv1(BN(h_N))                   (K channels)
    alpha   = softmax(logits / tau)

``skip_0`` is a learned 1×1×1 projection when the input width differs from the
hidden width; every other skip is the identity.  ``tau`` follows a linear
annealing schedule and is not trained.
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from .conv import ConvSpec
from .errors import ParameterError, StateError
from .module import BatchNorm, Conv3d, Module
from .tensor import Parameter, Tensor


def extract_context(x: Tensor) -> Tensor:
    return F.adaptive_avg_pool3d_to_unit(x)


def hidden_width(in_channels: int, num_experts: int, reduction: int = 16) -> int:
    return max(in_channels // reduction, num_experts)


def temperature_at(epoch: int, tau_start: float = 30.0, tau_end: float = 1.0, anneal_epochs: int = 10) -> float:
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    if anneal_epochs <= 0:
        return float(tau_end)
    frac = max(0.0, 1.0 - epoch / anneal_epochs)
    return tau_end + (tau_start - tau_end) * frac


class ResidualBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, gate_init: float, rng, dtype):
        self.bn = BatchNorm(in_ch, dtype=dtype)
        self.conv = Conv3d(ConvSpec(in_ch, out_ch, 1), rng, dtype=dtype)
        self.gate = Parameter(np.full(1, gate_init, dtype=dtype))
        self.skip = Conv3d(ConvSpec(in_ch, out_ch, 1), rng, bias=False, dtype=dtype) if in_ch != out_ch else None

    def forward(self, h: Tensor) -> Tensor:
        r = self.conv(F.gelu(self.bn(h)))
        shortcut = h if self.skip is None else self.skip(h)
        return shortcut + self.gate * r


class MappingNetwork(Module):
    def __init__(self, in_channels: int, num_experts: int, *, num_blocks: int = 2, reduction: int = 16,
                 gate_init: float = 0.25, tau_start: float = 30.0, tau_end: float = 1.0,
                 anneal_epochs: int = 10, rng: np.random.Generator | None = None, dtype=np.float32):
        if num_experts < 1 or num_blocks < 0 or in_channels < 1:
            raise ParameterError("in_channels and num_experts must be >= 1, num_blocks >= 0")
        if not (tau_start > 0 and tau_end > 0) or tau_end > tau_start:
            raise ParameterError("temperature schedule needs 0 < tau_end <= tau_start")
        self._config = dict(num_blocks=num_blocks, reduction=reduction, gate_init=gate_init,
                            tau_start=tau_start, tau_end=tau_end, anneal_epochs=anneal_epochs, dtype=dtype)
        self.in_channels = in_channels
        self.num_experts = num_experts
        self.hidden_channels = hidden_width(in_channels, num_experts, reduction)
        self.tau_start = float(tau_start)
        self.tau_end = float(tau_end)
        self.anneal_epochs = int(anneal_epochs)
        self._tau = np.array([self.tau_start], dtype=np.float64)
        self._initialized = rng is not None
        init_rng = rng if rng is not None else np.random.default_rng(0)
        width = in_channels
        self.blocks = []
        for _ in range(num_blocks):
            self.blocks.append(ResidualBlock(width, self.hidden_channels, gate_init, init_rng, dtype))
            width = self.hidden_channels
        self.final_bn = BatchNorm(width, dtype=dtype)
        self.proj = Conv3d(ConvSpec(width, num_experts, 1), init_rng, dtype=dtype)

    @property
    def tau(self) -> float:
        return float(self._tau[0])

    @tau.setter
    def tau(self, value: float) -> None:
        if not value > 0:
            raise ParameterError(f"temperature must be positive, got {value}")
        self._tau[0] = value

    def named_buffers(self, prefix: str = ""):
        # the current temperature travels with checkpoints
        yield f"{prefix}tau", self._tau
        yield from super().named_buffers(prefix)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        fresh = MappingNetwork(self.in_channels, self.num_experts, rng=rng, **self._config)
        self.load_state_dict(fresh.state_dict())
        self._initialized = True

    def logits(self, g: Tensor) -> Tensor:
        """Expert scores of shape B×K from pooled context ``g`` (B×C×1×1×1)."""
        if not self._initialized:
            raise StateError("mapping network parameters are not initialized")
        h = g
        for block in self.blocks:
            h = block(h)
        attn = self.proj(self.final_bn(h))
        return attn.reshape(attn.shape[0], self.num_experts)

    def forward(self, x: Tensor) -> Tensor:
        """Attention weights B×K for a B×C×D×H×W input."""
        return attention_weights(self.logits(extract_context(x)), self.tau)

    def update_temperature(self, epoch: int) -> float:
        self.tau = temperature_at(epoch, self.tau_start, self.tau_end, self.anneal_epochs)
        return self.tau


def mapping_forward(g: Tensor, net: MappingNetwork) -> Tensor:
    return net.logits(g)


def attention_weights(attn: Tensor, tau: float) -> Tensor:
    return F.softmax_with_temperature(attn, tau, axis=1)


def update_temperature(net: MappingNetwork, epoch: int) -> float:
    return net.update_temperature(epoch)
