"""Grouped 3D convolution (cross-correlation, zero padding).

Three execution paths: 1×1×1 kernels are a batched matmul; stride-1 kernels
use the direct kernels in :mod:`ekgnet.kernels`; anything else unfolds the
padded input into receptive-field columns and runs one matmul per group.  :func:`conv3d_naive` is a literal seven-loop
reference kept deliberately simple; it is the ground truth the fast path and
the dynamic convolution are checked against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor, make_result


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ShapeError(f"expected an int or a 3-vector, got {v!r}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    dilation: tuple[int, int, int] = (1, 1, 1)
    groups: int = 1

    def __post_init__(self):
        for name in ("kernel_size", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _triple(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ShapeError("channel counts and groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if min(self.kernel_size) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ShapeError("kernel_size, stride and dilation must be >= 1")
        if min(self.padding) < 0:
            raise ShapeError("padding must be non-negative")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel_size

    @property
    def fan_in(self) -> int:
        kd, kh, kw = self.kernel_size
        return self.in_channels // self.groups * kd * kh * kw

    def output_size(self, in_size) -> tuple[int, int, int]:
        out = []
        for n, k, s, p, d in zip(in_size, self.kernel_size, self.stride, self.padding, self.dilation):
            o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise ShapeError(f"non-positive output extent for input {tuple(in_size)} under {self}")
            out.append(o)
        return tuple(out)  # type: ignore[return-value]

    def with_groups(self, groups: int, in_channels: int, out_channels: int) -> "ConvSpec":
        return ConvSpec(in_channels, out_channels, self.kernel_size, self.stride,
                        self.padding, self.dilation, groups)

    def is_pointwise(self) -> bool:
        return (self.kernel_size == (1, 1, 1) and self.stride == (1, 1, 1)
                and self.padding == (0, 0, 0))


def _check(x: np.ndarray, w: np.ndarray, b, spec: ConvSpec) -> tuple[int, int, int]:
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be B×C×D×H×W, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} != expected {spec.weight_shape}")
    if b is not None and tuple(b.shape) != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} != ({spec.out_channels},)")
    return spec.output_size(x.shape[2:])


def _pad(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    pd, ph, pw = spec.padding
    if not (pd or ph or pw):
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _path(spec: ConvSpec) -> str:
    if spec.is_pointwise():
        return "pointwise"
    if spec.stride == (1, 1, 1):
        return "direct"
    return "im2col"


def _columns(xp: np.ndarray, spec: ConvSpec, out_size) -> np.ndarray:
    """Receptive-field columns shaped ``(B, G, Cg*kd*kh*kw, D'*H'*W')``."""
    bsz = xp.shape[0]
    cols = kernels.vol2col(xp, spec.kernel_size, spec.stride, spec.dilation, out_size)
    return cols.reshape(bsz, spec.groups, -1, int(np.prod(out_size)))


def _forward(x, w, b, spec):
    """Return the convolution output and whatever backward needs to reuse."""
    out_size = _check(x, w, b, spec)
    bsz = x.shape[0]
    g = spec.groups
    path = _path(spec)
    wm = w.reshape(1, g, spec.out_channels // g, -1)
    if path == "pointwise":
        saved = x.reshape(bsz, g, -1, int(np.prod(out_size)))
        out = np.matmul(wm, saved).reshape((bsz, spec.out_channels) + out_size)
    elif path == "direct":
        saved = _pad(x, spec)
        out = kernels.conv3d_fwd(saved, np.ascontiguousarray(w), g, spec.dilation, out_size)
    else:
        saved = _columns(_pad(x, spec), spec, out_size)
        out = np.matmul(wm, saved).reshape((bsz, spec.out_channels) + out_size)
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)
    return out, saved


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Fast grouped convolution on raw arrays."""
    return _forward(x, w, b, spec)[0]


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec,
                    with_bias: bool = True, need_x: bool = True, saved: np.ndarray | None = None):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv3d_forward`.

    ``saved`` may carry the forward pass's prepared input to skip rebuilding
    it; ``grad_x`` is ``None`` when ``need_x`` is false.
    """
    out_size = _check(x, w, None, spec)
    bsz = x.shape[0]
    g = spec.groups
    og = spec.out_channels // g
    expected = (bsz, spec.out_channels) + out_size
    if tuple(grad_out.shape) != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    grad_out = np.ascontiguousarray(grad_out)
    grad_b = grad_out.sum(axis=(0, 2, 3, 4)) if with_bias else None
    path = _path(spec)
    pd, ph, pw = spec.padding
    padded = (x.shape[2] + 2 * pd, x.shape[3] + 2 * ph, x.shape[4] + 2 * pw)
    go = grad_out.reshape(bsz, g, og, -1)
    wm = w.reshape(1, g, og, -1)

    if path == "direct":
        xp = saved if saved is not None else _pad(x, spec)
        grad_w = kernels.conv3d_bwd_weight(grad_out, xp, g, spec.kernel_size, spec.dilation)
    else:
        if saved is None:
            saved = (x.reshape(bsz, g, -1, go.shape[-1]) if path == "pointwise"
                     else _columns(_pad(x, spec), spec, out_size))
        grad_w = np.matmul(go, saved.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    if not need_x:
        return None, grad_w, grad_b

    if path == "pointwise":
        return np.matmul(wm.transpose(0, 1, 3, 2), go).reshape(x.shape), grad_w, grad_b
    if path == "direct":
        gxp = kernels.conv3d_bwd_data(grad_out, np.ascontiguousarray(w), g, spec.dilation, padded)
    else:
        kd, kh, kw = spec.kernel_size
        grad_cols = np.matmul(wm.transpose(0, 1, 3, 2), go)
        grad_cols = np.ascontiguousarray(
            grad_cols.reshape((bsz, spec.in_channels, kd, kh, kw) + out_size))
        gxp = kernels.col2vol(grad_cols, padded, spec.stride, spec.dilation)
    grad_x = np.ascontiguousarray(
        gxp[:, :, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]])
    return grad_x, grad_w, grad_b


def conv3d_naive(x, w, b, spec: ConvSpec) -> np.ndarray:
    """Reference convolution: plain nested loops, float64 accumulation.

    Only suitable for tiny shapes; the result is returned as float64.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    od, oh, ow = _check(x, w, b, spec)
    bsz, _, d_in, h_in, w_in = x.shape
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    kd, kh, kw = spec.kernel_size
    sd, sh, sw = spec.stride
    pd, ph, pw = spec.padding
    dd, dh, dw = spec.dilation
    xs = x.tolist()
    ws = w.tolist()
    out = np.zeros((bsz, spec.out_channels, od, oh, ow), dtype=np.float64)
    for n in range(bsz):
        for co in range(spec.out_channels):
            grp = co // og
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        acc = 0.0 if b is None else float(b[co])
                        for ci in range(cg):
                            cin = grp * cg + ci
                            for i in range(kd):
                                zi = z * sd - pd + i * dd
                                if zi < 0 or zi >= d_in:
                                    continue
                                for j in range(kh):
                                    yi = y * sh - ph + j * dh
                                    if yi < 0 or yi >= h_in:
                                        continue
                                    for k in range(kw):
                                        xi = xx * sw - pw + k * dw
                                        if xi < 0 or xi >= w_in:
                                            continue
                                        acc += float(xs[n][cin][zi][yi][xi]) * float(ws[co][ci][i][j][k])
                        out[n, co, z, y, xx] = acc
    return out


def conv3d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Differentiable grouped 3D convolution."""
    xd, wd = x.data, w.data
    bd = None if b is None else b.data
    out, saved = _forward(xd, wd, bd, spec)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx, gw, gb = conv3d_backward(g, xd, wd, spec, with_bias=b is not None,
                                     need_x=x.requires_grad, saved=saved)
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_result(out, inputs, bw, "conv3d")
