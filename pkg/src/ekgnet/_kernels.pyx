# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: volume unfolding for im2col convolution and
non-overlapping average pooling.  Mirrors ``ekgnet._kernels_py``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def vol2col(floating[:, :, :, :, ::1] xp, kernel, stride, dilation, out_size):
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t dd = dilation[0], dh = dilation[1], dw = dilation[2]
    cdef Py_ssize_t od = out_size[0], oh = out_size[1], ow = out_size[2]
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1]
    cdef Py_ssize_t b, c, i, j, k, z, y, x, zi, yi, kk, zz
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((nb, nc, kd * kh * kw, od * oh * ow), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for i in range(kd):
                    for j in range(kh):
                        for k in range(kw):
                            kk = (i * kh + j) * kw + k
                            for z in range(od):
                                zi = z * sd + i * dd
                                for y in range(oh):
                                    yi = y * sh + j * dh
                                    zz = (z * oh + y) * ow
                                    for x in range(ow):
                                        out[b, c, kk, zz + x] = xp[b, c, zi, yi, x * sw + k * dw]
    return out_arr.reshape(nb, nc, kd, kh, kw, od, oh, ow)


def col2vol(cols_arr, padded_size, stride, dilation):
    shape = cols_arr.shape
    cdef Py_ssize_t nb = shape[0], nc = shape[1]
    cdef Py_ssize_t kd = shape[2], kh = shape[3], kw = shape[4]
    cdef Py_ssize_t od = shape[5], oh = shape[6], ow = shape[7]
    cols_arr = np.ascontiguousarray(cols_arr).reshape(nb, nc, kd * kh * kw, od * oh * ow)
    return _col2vol(cols_arr, padded_size, stride, dilation, kd, kh, kw, od, oh, ow)


def _col2vol(floating[:, :, :, ::1] cols, padded_size, stride, dilation,
             Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw,
             Py_ssize_t od, Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t nb = cols.shape[0], nc = cols.shape[1]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t dd = dilation[0], dh = dilation[1], dw = dilation[2]
    cdef Py_ssize_t b, c, i, j, k, z, y, x, zi, yi, kk, zz
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((nb, nc) + tuple(padded_size), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    # accumulation order matches the numpy fallback (kernel offsets outermost)
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for i in range(kd):
                    for j in range(kh):
                        for k in range(kw):
                            kk = (i * kh + j) * kw + k
                            for z in range(od):
                                zi = z * sd + i * dd
                                for y in range(oh):
                                    yi = y * sh + j * dh
                                    zz = (z * oh + y) * ow
                                    for x in range(ow):
                                        out[b, c, zi, yi, x * sw + k * dw] += cols[b, c, kk, zz + x]
    return out_arr


def avg_pool3d_forward(floating[:, :, :, :, ::1] x, Py_ssize_t f):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], w = x.shape[4]
    cdef Py_ssize_t od = (d + f - 1) // f, oh = (h + f - 1) // f, ow = (w + f - 1) // f
    cdef Py_ssize_t b, c, z, y, xx, i, j, k, z1, y1, x1, n
    cdef double acc
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((nb, nc, od, oh, ow), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for z in range(od):
                    z1 = min(z * f + f, d)
                    for y in range(oh):
                        y1 = min(y * f + f, h)
                        for xx in range(ow):
                            x1 = min(xx * f + f, w)
                            acc = 0.0
                            for i in range(z * f, z1):
                                for j in range(y * f, y1):
                                    for k in range(xx * f, x1):
                                        acc = acc + x[b, c, i, j, k]
                            n = (z1 - z * f) * (y1 - y * f) * (x1 - xx * f)
                            out[b, c, z, y, xx] = <floating>(acc / n)
    return out_arr


def avg_pool3d_backward(floating[:, :, :, :, ::1] g, in_size, Py_ssize_t f):
    cdef Py_ssize_t nb = g.shape[0], nc = g.shape[1]
    cdef Py_ssize_t d = in_size[0], h = in_size[1], w = in_size[2]
    cdef Py_ssize_t b, c, i, j, k, z1, y1, x1
    cdef floating share
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((nb, nc, d, h, w), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for i in range(d):
                    z1 = min((i // f) * f + f, d) - (i // f) * f
                    for j in range(h):
                        y1 = min((j // f) * f + f, h) - (j // f) * f
                        for k in range(w):
                            x1 = min((k // f) * f + f, w) - (k // f) * f
                            share = g[b, c, i // f, j // f, k // f] / <floating>(z1 * y1 * x1)
                            out[b, c, i, j, k] = share
    return out_arr


# Direct stride-1 grouped convolution.  Positions are addressed with the padded
# row pitch (Wp), so for each (output plane, kernel tap) the inner loop runs over
# ``(oh - 1) * Wp + ow`` contiguous elements; columns x >= ow are scratch.

def conv3d_fwd(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] w,
               Py_ssize_t groups, dilation, out_size):
    cdef Py_ssize_t nb = xp.shape[0], dp = xp.shape[2], hp = xp.shape[3], wp = xp.shape[4]
    cdef Py_ssize_t nout = w.shape[0], cg = w.shape[1], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t dd = dilation[0], dh = dilation[1], dw = dilation[2]
    cdef Py_ssize_t od = out_size[0], oh = out_size[1], ow = out_size[2]
    cdef Py_ssize_t og = nout // groups, plane = hp * wp, span = (oh - 1) * wp + ow
    cdef Py_ssize_t b, o, c, cin, i, j, k, z, p, base
    cdef floating wv
    cdef floating* src
    cdef floating* dst
    dtype = np.float32 if floating is float else np.float64
    buf_arr = np.zeros((nb, nout, od, oh * wp), dtype=dtype)
    cdef floating[:, :, :, ::1] buf = buf_arr
    with nogil:
        for b in range(nb):
            for o in range(nout):
                for c in range(cg):
                    cin = (o // og) * cg + c
                    for i in range(kd):
                        for j in range(kh):
                            for k in range(kw):
                                wv = w[o, c, i, j, k]
                                base = i * dd * plane + j * dh * wp + k * dw
                                for z in range(od):
                                    src = &xp[b, cin, 0, 0, 0] + z * plane + base
                                    dst = &buf[b, o, z, 0]
                                    for p in range(span):
                                        dst[p] += wv * src[p]
    return np.ascontiguousarray(buf_arr.reshape(nb, nout, od, oh, wp)[:, :, :, :, :ow])


def conv3d_bwd_data(floating[:, :, :, :, ::1] go, floating[:, :, :, :, ::1] w,
                    Py_ssize_t groups, dilation, padded_size):
    cdef Py_ssize_t nb = go.shape[0], od = go.shape[2], oh = go.shape[3], ow = go.shape[4]
    cdef Py_ssize_t nout = w.shape[0], cg = w.shape[1], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t dd = dilation[0], dh = dilation[1], dw = dilation[2]
    cdef Py_ssize_t dp = padded_size[0], hp = padded_size[1], wp = padded_size[2]
    cdef Py_ssize_t og = nout // groups, plane = hp * wp, span = (oh - 1) * wp + ow
    cdef Py_ssize_t b, o, c, cin, i, j, k, z, y, x, p, base
    cdef floating wv
    cdef floating* src
    cdef floating* dst
    dtype = np.float32 if floating is float else np.float64
    # grad_out re-laid with the padded pitch; scratch columns stay zero
    gp_arr = np.zeros((nb, nout, od, oh * wp), dtype=dtype)
    cdef floating[:, :, :, ::1] gp = gp_arr
    out_arr = np.zeros((nb, groups * cg, dp, hp, wp), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    with nogil:
        for b in range(nb):
            for o in range(nout):
                for z in range(od):
                    for y in range(oh):
                        for x in range(ow):
                            gp[b, o, z, y * wp + x] = go[b, o, z, y, x]
        for b in range(nb):
            for o in range(nout):
                for c in range(cg):
                    cin = (o // og) * cg + c
                    for i in range(kd):
                        for j in range(kh):
                            for k in range(kw):
                                wv = w[o, c, i, j, k]
                                base = i * dd * plane + j * dh * wp + k * dw
                                for z in range(od):
                                    dst = &out[b, cin, 0, 0, 0] + z * plane + base
                                    src = &gp[b, o, z, 0]
                                    for p in range(span):
                                        dst[p] += wv * src[p]
    return out_arr


def conv3d_bwd_weight(floating[:, :, :, :, ::1] go, floating[:, :, :, :, ::1] xp,
                      Py_ssize_t groups, kernel, dilation):
    cdef Py_ssize_t nb = go.shape[0], nout = go.shape[1], od = go.shape[2], oh = go.shape[3], ow = go.shape[4]
    cdef Py_ssize_t hp = xp.shape[3], wp = xp.shape[4]
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t dd = dilation[0], dh = dilation[1], dw = dilation[2]
    cdef Py_ssize_t cg = xp.shape[1] // groups, og = nout // groups
    cdef Py_ssize_t plane = hp * wp, span = (oh - 1) * wp + ow
    cdef Py_ssize_t b, o, c, cin, i, j, k, z, y, x, p, base
    cdef double acc, a0, a1, a2, a3
    cdef Py_ssize_t span4
    cdef floating* src
    cdef floating* g
    dtype = np.float32 if floating is float else np.float64
    gp_arr = np.zeros((nb, nout, od, oh * wp), dtype=dtype)
    cdef floating[:, :, :, ::1] gp = gp_arr
    out_arr = np.zeros((nout, cg, kd, kh, kw), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    with nogil:
        for b in range(nb):
            for o in range(nout):
                for z in range(od):
                    for y in range(oh):
                        for x in range(ow):
                            gp[b, o, z, y * wp + x] = go[b, o, z, y, x]
        for o in range(nout):
            for c in range(cg):
                cin = (o // og) * cg + c
                for i in range(kd):
                    for j in range(kh):
                        for k in range(kw):
                            base = i * dd * plane + j * dh * wp + k * dw
                            a0 = 0.0
                            a1 = 0.0
                            a2 = 0.0
                            a3 = 0.0
                            span4 = span - span % 4
                            for b in range(nb):
                                for z in range(od):
                                    src = &xp[b, cin, 0, 0, 0] + z * plane + base
                                    g = &gp[b, o, z, 0]
                                    # four independent partial sums for ILP
                                    for p in range(0, span4, 4):
                                        a0 = a0 + g[p] * src[p]
                                        a1 = a1 + g[p + 1] * src[p + 1]
                                        a2 = a2 + g[p + 2] * src[p + 2]
                                        a3 = a3 + g[p + 3] * src[p + 3]
                                    for p in range(span4, span):
                                        a0 = a0 + g[p] * src[p]
                            acc = (a0 + a1) + (a2 + a3)
                            out[o, c, i, j, k] = <floating>acc
    return out_arr
