"""Pure-numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_kernels`` extension; used when
the extension is unavailable or ``EKGNET_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def vol2col(xp, kernel, stride, dilation, out_size):
    """Unfold a padded volume ``(B, C, Dp, Hp, Wp)`` into
    ``(B, C, kd, kh, kw, od, oh, ow)`` receptive-field columns."""
    kd, kh, kw = kernel
    sd, sh, sw = stride
    dd, dh, dw = dilation
    od, oh, ow = out_size
    b, c = xp.shape[:2]
    s = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, kd, kh, kw, od, oh, ow),
        strides=(s[0], s[1], dd * s[2], dh * s[3], dw * s[4], sd * s[2], sh * s[3], sw * s[4]),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def col2vol(cols, padded_size, stride, dilation):
    """Adjoint of :func:`vol2col`: scatter-add columns back into a padded volume."""
    b, c, kd, kh, kw, od, oh, ow = cols.shape
    sd, sh, sw = stride
    dd, dh, dw = dilation
    out = np.zeros((b, c) + tuple(padded_size), dtype=cols.dtype)
    for i in range(kd):
        d0 = i * dd
        for j in range(kh):
            h0 = j * dh
            for k in range(kw):
                w0 = k * dw
                out[:, :, d0:d0 + sd * (od - 1) + 1:sd,
                    h0:h0 + sh * (oh - 1) + 1:sh,
                    w0:w0 + sw * (ow - 1) + 1:sw] += cols[:, :, i, j, k]
    return out


def _pool_geometry(shape, f):
    out = tuple(-(-n // f) for n in shape)
    pad = tuple(o * f - n for o, n in zip(out, shape))
    return out, pad


def _window_counts(shape, f, dtype):
    # number of valid elements in each (possibly truncated) edge window
    counts = np.ones((), dtype=dtype)
    for n in shape:
        m = -(-n // f)
        per_axis = np.full(m, f, dtype=dtype)
        per_axis[-1] = n - f * (m - 1)
        counts = np.multiply.outer(counts, per_axis)
    return counts


def avg_pool3d_forward(x, f):
    """Non-overlapping ``f``-cube mean pooling; edge windows average valid cells."""
    b, c, d, h, w = x.shape
    (od, oh, ow), (pd, ph, pw) = _pool_geometry((d, h, w), f)
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, pd), (0, ph), (0, pw)))
    sums = x.reshape(b, c, od, f, oh, f, ow, f).sum(axis=(3, 5, 7))
    return sums / _window_counts((d, h, w), f, x.dtype)


def avg_pool3d_backward(g, in_size, f):
    d, h, w = in_size
    g = g / _window_counts((d, h, w), f, g.dtype)
    g = g.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    return np.ascontiguousarray(g[:, :, :d, :h, :w])


def conv3d_fwd(xp, w, groups, dilation, out_size):
    """Stride-1 grouped convolution of a padded volume (im2col + matmul)."""
    b = xp.shape[0]
    o = w.shape[0]
    cols = vol2col(xp, w.shape[2:], (1, 1, 1), dilation, out_size)
    cols = cols.reshape(b, groups, -1, int(np.prod(out_size)))
    out = np.matmul(w.reshape(1, groups, o // groups, -1), cols)
    return out.reshape((b, o) + tuple(out_size))


def conv3d_bwd_data(go, w, groups, dilation, padded_size):
    b, o = go.shape[:2]
    out_size = go.shape[2:]
    cg = w.shape[1]
    wm = w.reshape(1, groups, o // groups, -1)
    gcols = np.matmul(wm.transpose(0, 1, 3, 2), go.reshape(b, groups, o // groups, -1))
    gcols = np.ascontiguousarray(gcols.reshape((b, groups * cg) + tuple(w.shape[2:]) + tuple(out_size)))
    return col2vol(gcols, padded_size, (1, 1, 1), dilation)


def conv3d_bwd_weight(go, xp, groups, kernel, dilation):
    b, o = go.shape[:2]
    out_size = go.shape[2:]
    cols = vol2col(xp, kernel, (1, 1, 1), dilation, out_size)
    cols = cols.reshape(b, groups, -1, int(np.prod(out_size)))
    gw = np.matmul(go.reshape(b, groups, o // groups, -1), cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return gw.reshape((o, xp.shape[1] // groups) + tuple(kernel))
