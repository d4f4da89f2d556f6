"""3D DenseNet with expert-kernel convolutions and cross-block links.

Layout (input B×1×L×M×N, spectral axis as depth):

* stem: static 3×3×3 conv to ``2*k0`` channels
* stage m (0-based): dense block of ``stages[m]`` layers, growth ``2**m * k0``.
  Each layer is BN→GELU→1×1×1 conv (4k)→BN→GELU→3×3×3 expert conv (k).
* block m > 0 input is the previous transition output concatenated with the
  stem and the new features of every earlier block, each average-pooled by
  ``2**(m - level)`` to the current resolution
* transition after every stage but the last: BN→GELU→1×1×1 conv halving
  channels→2× average pooling
* head: BN→GELU→global average pool→linear
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import functional as F
from .conv import ConvSpec
from .errors import ConfigError, ParameterError, ShapeError
from .expert import ExpertConv3d
from .mapping import MappingNetwork
from .module import BatchNorm, Conv3d, Linear, Module
from .tensor import Tensor, concat


def growth_rate(m: int, k0: int) -> int:
    """Growth of the ``m``-th dense block (1-based): ``2**(m-1) * k0``."""
    if m < 1:
        raise ParameterError(f"stage index is 1-based, got {m}")
    return 2 ** (m - 1) * k0


@dataclass
class ArchConfig:
    stages: tuple[int, ...] = (4, 6, 8)
    k0: int = 8
    growth_rates: tuple[int, ...] | None = None
    groups: int = 4
    experts: int = 4
    reduction: int = 16
    gate_init: float = 0.25
    mapping_blocks: int = 2
    bottleneck: int = 4
    num_classes: int = 16
    patch: tuple[int, int, int] = (15, 15, 200)  # (M, N, L)
    expert_bias: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.patch = tuple(int(p) for p in self.patch)
        expected = tuple(growth_rate(m + 1, self.k0) for m in range(len(self.stages)))
        if self.growth_rates is None:
            self.growth_rates = expected
        self.growth_rates = tuple(int(g) for g in self.growth_rates)
        if len(self.growth_rates) != len(self.stages):
            raise ConfigError("stages and growth_rates must have equal length")
        if self.growth_rates != expected:
            raise ConfigError(f"growth_rates {self.growth_rates} != 2^m * k0 sequence {expected}")
        if not self.stages or min(self.stages) < 1:
            raise ConfigError("every stage needs at least one dense layer")
        if self.k0 < 1 or self.experts < 1 or self.groups < 1 or self.num_classes < 2:
            raise ConfigError("k0, experts, groups must be >= 1 and num_classes >= 2")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError(f"patch must be three positive extents, got {self.patch}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class Link(NamedTuple):
    source: str
    target_block: int
    factor: int
    channels: int


class DenseLayer(Module):
    def __init__(self, in_ch: int, growth: int, cfg: ArchConfig, rng):
        dt = cfg.np_dtype
        mid = cfg.bottleneck * growth
        self.in_channels = in_ch
        self.growth = growth
        self.bn1 = BatchNorm(in_ch, dtype=dt)
        self.conv1 = Conv3d(ConvSpec(in_ch, mid, 1), rng, bias=False, dtype=dt)
        self.bn2 = BatchNorm(mid, dtype=dt)
        spec = ConvSpec(mid, growth, 3, padding=1, groups=cfg.groups)
        mapping = MappingNetwork(mid, cfg.experts, num_blocks=cfg.mapping_blocks, reduction=cfg.reduction,
                                 gate_init=cfg.gate_init, rng=rng, dtype=dt)
        self.conv2 = ExpertConv3d(spec, cfg.experts, bias=cfg.expert_bias, rng=rng, dtype=dt, mapping=mapping)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"dense layer expects {self.in_channels} channels, got {x.shape[1]}")
        h = self.conv1(F.gelu(self.bn1(x)))
        return self.conv2(F.gelu(self.bn2(h)))


def dense_layer_forward(concat_in: Tensor, layer: DenseLayer) -> Tensor:
    return layer(concat_in)


class Transition(Module):
    def __init__(self, in_ch: int, cfg: ArchConfig, rng):
        dt = cfg.np_dtype
        self.out_channels = max(1, in_ch // 2)
        self.bn = BatchNorm(in_ch, dtype=dt)
        self.conv = Conv3d(ConvSpec(in_ch, self.out_channels, 1), rng, bias=False, dtype=dt)

    def forward(self, x: Tensor) -> Tensor:
        return F.avg_pool3d(self.conv(F.gelu(self.bn(x))), 2)


def cross_block_downsample(feat: Tensor, factor: int) -> Tensor:
    return F.avg_pool3d(feat, factor)


class EKGNet(Module):
    """The assembled model graph; ``link_table`` records every cross-block input."""

    def __init__(self, cfg: ArchConfig, rng: np.random.Generator | int = 0):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(int(rng))
        self.cfg = cfg
        dt = cfg.np_dtype
        stem_ch = 2 * cfg.k0
        self.stem = Conv3d(ConvSpec(1, stem_ch, 3, padding=1), rng, dtype=dt)
        self.blocks: list[list[DenseLayer]] = []
        self.transitions = []
        self.link_table: list[Link] = []
        source_channels = {"stem": stem_ch}
        for m, (n_layers, k) in enumerate(zip(cfg.stages, cfg.growth_rates)):
            links = []
            if m > 0:
                links.append(Link(f"transition{m - 1}", m, 1, self.transitions[-1].out_channels))
            links.append(Link("stem", m, 2 ** m, stem_ch))
            for j in range(m):
                links.append(Link(f"block{j}", m, 2 ** (m - j), source_channels[f"block{j}"]))
            block_in = sum(link.channels for link in links)
            layers = [DenseLayer(block_in + i * k, k, cfg, rng) for i in range(n_layers)]
            # build-time channel audit
            for i, layer in enumerate(layers):
                if layer.in_channels != block_in + sum(l.growth for l in layers[:i]):
                    raise ShapeError(f"block {m} layer {i}: channel bookkeeping mismatch")
            self.link_table.extend(links)
            self.blocks.append(layers)
            source_channels[f"block{m}"] = n_layers * k
            block_out = block_in + n_layers * k
            if m < len(cfg.stages) - 1:
                self.transitions.append(Transition(block_out, cfg, rng))
        self.out_channels = block_out
        self.head_bn = BatchNorm(block_out, dtype=dt)
        self.classifier = Linear(block_out, cfg.num_classes, rng, dtype=dt)

    def _children(self):
        yield from super()._children()
        for m, layers in enumerate(self.blocks):
            for i, layer in enumerate(layers):
                yield f"block{m}.layer{i}", layer

    def mapping_networks(self) -> list[MappingNetwork]:
        return [m for m in self.modules() if isinstance(m, MappingNetwork)]

    def set_temperature(self, tau: float) -> None:
        for net in self.mapping_networks():
            net.tau = tau

    def forward(self, x: Tensor) -> Tensor:
        m_, n_, l_ = self.cfg.patch
        if x.ndim != 5 or x.shape[1:] != (1, l_, m_, n_):
            raise ShapeError(f"expected B×1×{l_}×{m_}×{n_} input, got {x.shape}")
        if x.dtype != self.cfg.np_dtype:
            x = Tensor(x.data.astype(self.cfg.np_dtype), requires_grad=x.requires_grad)
        sources = {"stem": self.stem(x)}
        pooled: dict[tuple[str, int], Tensor] = {}
        feats = None
        for m, layers in enumerate(self.blocks):
            inputs = []
            for link in (lk for lk in self.link_table if lk.target_block == m):
                key = (link.source, link.factor)
                if key not in pooled:
                    pooled[key] = cross_block_downsample(sources[link.source], link.factor)
                inputs.append(pooled[key])
            new = []
            for layer in layers:
                new.append(layer(concat(inputs + new, axis=1)))
            sources[f"block{m}"] = concat(new, axis=1)
            feats = concat(inputs + new, axis=1)
            if m < len(self.transitions):
                sources[f"transition{m}"] = self.transitions[m](feats)
        h = F.adaptive_avg_pool3d_to_unit(F.gelu(self.head_bn(feats)))
        return self.classifier(h.reshape(h.shape[0], self.out_channels))


def build_model(cfg: ArchConfig, seed: int = 0) -> EKGNet:
    return EKGNet(cfg, np.random.default_rng(seed))


def model_forward(model: EKGNet, x: Tensor) -> Tensor:
    return model(x)
