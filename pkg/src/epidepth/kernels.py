"""Hot numeric kernels: 2D cross-correlation and bilinear gather, fwd + bwd.

Each kernel has a loop implementation (numba-jitted when the numba backend is
active) and a vectorized numpy implementation.  The module-level names
``conv2d_forward`` etc. bind whichever variant measures faster per kernel
(see the dispatch block at the bottom and benchmarks/bench_kernels.py);
``EPIDEPTH_NO_NUMBA=1`` forces the numpy variants everywhere.  The suffixed
variants stay available for the benchmark and cross-checks.

Conventions: all arrays are C-contiguous float64.  Padding is applied by the
caller, so kernels see pre-padded inputs.  Convolution here means
cross-correlation (no kernel flip).
"""

import numpy as np

from .backend import NUMBA_AVAILABLE, jit_if_available


# ---------------------------------------------------------------- conv2d ---

def _conv2d_forward_loops(xpad, weight, bias, stride):
    nb, cin, hp, wp = xpad.shape
    cout, _, kh, kw = weight.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.empty((nb, cout, ho, wo))
    # function-local accumulator row keeps the innermost loop contiguous and
    # alias-free so it vectorizes; stride 1 gets a unit-step specialization
    row = np.empty(wo)
    for b in range(nb):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    row[j] = bias[co]
                for c in range(cin):
                    for u in range(kh):
                        xrow = xpad[b, c, i * stride + u]
                        for v in range(kw):
                            wcoef = weight[co, c, u, v]
                            if stride == 1:
                                for j in range(wo):
                                    row[j] += wcoef * xrow[v + j]
                            else:
                                for j in range(wo):
                                    row[j] += wcoef * xrow[v + j * stride]
                out[b, co, i, :] = row
    return out


def _conv2d_backward_input_loops(grad, weight, stride, hp, wp):
    nb, cout, ho, wo = grad.shape
    _, cin, kh, kw = weight.shape
    gx = np.empty((nb, cin, hp, wp))
    plane = np.empty((hp, wp))
    for b in range(nb):
        for c in range(cin):
            for i in range(hp):
                for j in range(wp):
                    plane[i, j] = 0.0
            for co in range(cout):
                for i in range(ho):
                    grow = grad[b, co, i]
                    for u in range(kh):
                        prow = plane[i * stride + u]
                        for v in range(kw):
                            wcoef = weight[co, c, u, v]
                            if stride == 1:
                                for j in range(wo):
                                    prow[v + j] += wcoef * grow[j]
                            else:
                                for j in range(wo):
                                    prow[v + j * stride] += wcoef * grow[j]
            gx[b, c, :, :] = plane
    return gx


def _conv2d_backward_kernel_loops(grad, xpad, kh, kw, stride):
    nb, cout, ho, wo = grad.shape
    _, cin, _, _ = xpad.shape
    gw = np.zeros((cout, cin, kh, kw))
    for b in range(nb):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    g = grad[b, co, i, j]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                gw[co, c, u, v] += g * xpad[b, c, i * stride + u, j * stride + v]
    return gw


conv2d_forward_numba = jit_if_available(_conv2d_forward_loops)
conv2d_backward_input_numba = jit_if_available(_conv2d_backward_input_loops)
conv2d_backward_kernel_numba = jit_if_available(_conv2d_backward_kernel_loops)


def _conv_windows(xpad, kh, kw, stride, ho, wo):
    nb, cin = xpad.shape[:2]
    s = xpad.strides
    shape = (nb, cin, ho, wo, kh, kw)
    strides = (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3])
    return np.lib.stride_tricks.as_strided(xpad, shape, strides, writeable=False)


def conv2d_forward_numpy(xpad, weight, bias, stride):
    cout, _, kh, kw = weight.shape
    ho = (xpad.shape[2] - kh) // stride + 1
    wo = (xpad.shape[3] - kw) // stride + 1
    win = _conv_windows(xpad, kh, kw, stride, ho, wo)
    out = np.einsum("bcijuv,ocuv->boij", win, weight, optimize=True)
    out += bias[None, :, None, None]
    return out


def conv2d_backward_input_numpy(grad, weight, stride, hp, wp):
    nb, cout, ho, wo = grad.shape
    _, cin, kh, kw = weight.shape
    gx = np.zeros((nb, cin, hp, wp))
    # accumulate one kernel tap at a time; each tap is a strided slice add
    t = np.einsum("boij,ocuv->bcuvij", grad, weight, optimize=True)
    for u in range(kh):
        for v in range(kw):
            gx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += t[:, :, u, v]
    return gx


def conv2d_backward_kernel_numpy(grad, xpad, kh, kw, stride):
    nb, cout, ho, wo = grad.shape
    win = _conv_windows(xpad, kh, kw, stride, ho, wo)
    return np.einsum("boij,bcijuv->ocuv", grad, win, optimize=True)


# ------------------------------------------------------- bilinear gather ---

def _bilinear_forward_loops(feat, xy):
    cin, h, w = feat.shape
    n = xy.shape[0]
    out = np.empty((n, cin))
    for i in range(n):
        x = xy[i, 0]
        y = xy[i, 1]
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        xi0 = min(max(int(x0), 0), w - 1)
        xi1 = min(max(int(x0) + 1, 0), w - 1)
        yi0 = min(max(int(y0), 0), h - 1)
        yi1 = min(max(int(y0) + 1, 0), h - 1)
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = fx * (1.0 - fy)
        w10 = (1.0 - fx) * fy
        w11 = fx * fy
        for c in range(cin):
            out[i, c] = (w00 * feat[c, yi0, xi0] + w01 * feat[c, yi0, xi1]
                         + w10 * feat[c, yi1, xi0] + w11 * feat[c, yi1, xi1])
    return out


def _bilinear_backward_loops(grad, xy, cin, h, w):
    n = xy.shape[0]
    gf = np.zeros((cin, h, w))
    for i in range(n):
        x = xy[i, 0]
        y = xy[i, 1]
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        xi0 = min(max(int(x0), 0), w - 1)
        xi1 = min(max(int(x0) + 1, 0), w - 1)
        yi0 = min(max(int(y0), 0), h - 1)
        yi1 = min(max(int(y0) + 1, 0), h - 1)
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = fx * (1.0 - fy)
        w10 = (1.0 - fx) * fy
        w11 = fx * fy
        for c in range(cin):
            g = grad[i, c]
            gf[c, yi0, xi0] += w00 * g
            gf[c, yi0, xi1] += w01 * g
            gf[c, yi1, xi0] += w10 * g
            gf[c, yi1, xi1] += w11 * g
    return gf


bilinear_forward_numba = jit_if_available(_bilinear_forward_loops)
bilinear_backward_numba = jit_if_available(_bilinear_backward_loops)


def _bilinear_terms(xy, h, w):
    x = xy[:, 0]
    y = xy[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    xi0 = np.clip(x0.astype(np.int64), 0, w - 1)
    xi1 = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    yi0 = np.clip(y0.astype(np.int64), 0, h - 1)
    yi1 = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    corners = ((yi0, xi0), (yi0, xi1), (yi1, xi0), (yi1, xi1))
    return weights, corners


def bilinear_forward_numpy(feat, xy):
    cin, h, w = feat.shape
    weights, corners = _bilinear_terms(xy, h, w)
    out = np.zeros((xy.shape[0], cin))
    for wgt, (yi, xi) in zip(weights, corners):
        out += feat[:, yi, xi].T * wgt[:, None]
    return out


def bilinear_backward_numpy(grad, xy, cin, h, w):
    weights, corners = _bilinear_terms(xy, h, w)
    gf = np.zeros((h * w, cin))
    for wgt, (yi, xi) in zip(weights, corners):
        np.add.at(gf, yi * w + xi, grad * wgt[:, None])
    return np.ascontiguousarray(gf.T.reshape(cin, h, w))


# ------------------------------------------------------------- dispatch ---
# Per-kernel choice follows benchmarks/bench_kernels.py: the convolution
# forward and input-gradient passes are fastest through the strided-window
# einsum (BLAS), while the gather-heavy bilinear passes and the weight
# gradient win as jitted loops.

if NUMBA_AVAILABLE:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward_input = conv2d_backward_input_numpy
    conv2d_backward_kernel = conv2d_backward_kernel_numba
    bilinear_forward = bilinear_forward_numba
    bilinear_backward = bilinear_backward_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward_input = conv2d_backward_input_numpy
    conv2d_backward_kernel = conv2d_backward_kernel_numpy
    bilinear_forward = bilinear_forward_numpy
    bilinear_backward = bilinear_backward_numpy
