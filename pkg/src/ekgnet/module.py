"""Minimal layer containers: parameter discovery, train/eval mode, state dicts."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .conv import ConvSpec, conv3d
from .errors import LoadError
from .tensor import Parameter, Tensor


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{i}", item
            elif isinstance(value, (Module, Parameter)):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise LoadError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != np.shape(value):
                raise LoadError(f"{name}: shape {np.shape(value)} != {target.shape}")
            target[...] = value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class BatchNorm(Module):
    def __init__(self, num_features: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        self.weight = Parameter(np.ones(num_features, dtype=dtype))
        self.bias = Parameter(np.zeros(num_features, dtype=dtype))
        self._state = F.BatchNormState(num_features, momentum=momentum, eps=eps, dtype=dtype)

    @property
    def state(self) -> F.BatchNormState:
        return self._state

    @property
    def running_mean(self) -> np.ndarray:
        return self._state.running_mean

    @property
    def running_var(self) -> np.ndarray:
        return self._state.running_var

    def named_buffers(self, prefix: str = ""):
        yield f"{prefix}running_mean", self._state.running_mean
        yield f"{prefix}running_var", self._state.running_var

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.weight, self.bias, self._state, self.training)


class Conv3d(Module):
    """Static convolution with He-normal weights drawn from ``rng``."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.spec = spec
        std = np.sqrt(2.0 / spec.fan_in)
        self.weight = Parameter((rng.standard_normal(spec.weight_shape) * std).astype(dtype))
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.spec)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
