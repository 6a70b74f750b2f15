"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` records operations in execution order while active; backward
replays the records in exact reverse order.  Only the operators the depth
network needs are provided, each with a hand-written backward rule that is
finite-difference checked in the test suite.

All data is float64.  Coordinates passed to :func:`bilinear_sample` are
treated as constants: the sampler is differentiable with respect to the
feature values only.
"""

import numpy as np

from . import kernels
from .errors import ComputationError


class Variable:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)


def as_variable(x):
    return x if isinstance(x, Variable) else Variable(x)


class Tape:
    """Ordered operation record; context manager activating recording."""

    def __init__(self):
        self._records = []
        self._used = False

    def __enter__(self):
        _stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and accumulate grads into every ancestor."""
        if not isinstance(loss, Variable):
            raise ValueError("backward expects a Variable loss")
        if loss.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if self._used:
            raise ComputationError("backward already ran on this tape; record a fresh tape")
        self._used = True
        loss.grad = np.ones(())
        for out, backward_fn in reversed(self._records):
            if out.grad is not None:
                backward_fn(out.grad)


_stack = []


def _active_tape():
    return _stack[-1] if _stack else None


def backward(loss):
    """Run backward on the tape that recorded ``loss``."""
    if not isinstance(loss, Variable) or loss._tape is None:
        raise ValueError("loss was not recorded on any active tape")
    loss._tape.backward(loss)


def _accum(var, g):
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.zeros_like(var.data)
    var.grad += g


def _make(data, inputs, backward_fn):
    out = Variable(data)
    out.requires_grad = any(v.requires_grad for v in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        tape._records.append((out, backward_fn))
    return out


# ------------------------------------------------------- elementwise ops ---

def add(a, b):
    if not isinstance(b, Variable) and np.ndim(b) == 0:
        a = as_variable(a)
        c = float(b)

        def bwd(g):
            _accum(a, g)

        return _make(a.data + c, (a,), bwd)
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape:
        raise ValueError(f"add shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def neg(a):
    a = as_variable(a)

    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd)


def sub(a, b):
    return add(a, neg(b) if isinstance(b, Variable) else -np.asarray(b))


def mul(a, b):
    if not isinstance(b, Variable) and np.ndim(b) == 0:
        a = as_variable(a)
        c = float(b)

        def bwd(g):
            _accum(a, g * c)

        return _make(a.data * c, (a,), bwd)
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b):
    if not isinstance(b, Variable) and np.ndim(b) == 0:
        return mul(a, 1.0 / float(b))
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape:
        raise ValueError(f"div shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), bwd)


def absolute(a):
    a = as_variable(a)
    s = np.sign(a.data)

    def bwd(g):
        _accum(a, g * s)

    return _make(np.abs(a.data), (a,), bwd)


def log(a):
    a = as_variable(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def exp(a):
    a = as_variable(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def relu(a):
    a = as_variable(a)
    gate = a.data > 0.0

    def bwd(g):
        _accum(a, g * gate)

    return _make(np.where(gate, a.data, 0.0), (a,), bwd)


def clamp_min(a, floor):
    a = as_variable(a)
    gate = a.data > floor

    def bwd(g):
        _accum(a, g * gate)

    return _make(np.where(gate, a.data, floor), (a,), bwd)


def sum_all(a):
    a = as_variable(a)

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(), (a,), bwd)


def softmax_lastdim(a):
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    a = as_variable(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(a, p * (g - dot))

    return _make(p, (a,), bwd)


# --------------------------------------------------------- linear algebra ---

def linear(x, weight, bias):
    """Affine map over the trailing axis: y[..., o] = x[..., m] W[o, m] + b[o]."""
    x, weight, bias = as_variable(x), as_variable(weight), as_variable(bias)
    if x.shape[-1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ValueError(f"linear shapes incompatible: x {x.shape}, W {weight.shape}, b {bias.shape}")
    out_data = x.data @ weight.data.T + bias.data

    def bwd(g):
        _accum(x, g @ weight.data)
        gf = g.reshape(-1, g.shape[-1])
        xf = x.data.reshape(-1, x.shape[-1])
        _accum(weight, gf.T @ xf)
        _accum(bias, gf.sum(axis=0))

    return _make(out_data, (x, weight, bias), bwd)


def conv2d(x, weight, bias, stride=1, padding=0):
    """2D cross-correlation of x[B,C,H,W] with weight[O,C,kh,kw] plus bias[O]."""
    x, weight, bias = as_variable(x), as_variable(weight), as_variable(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects x[B,C,H,W] and weight[O,C,kh,kw]")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: {x.shape[1]} vs {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError("conv2d bias shape mismatch")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    kh, kw = weight.shape[2], weight.shape[3]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ValueError("conv2d input smaller than kernel")
    if padding:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = x.data
    xpad = np.ascontiguousarray(xpad)
    out_data = kernels.conv2d_forward(xpad, weight.data, bias.data, stride)
    hp, wp = xpad.shape[2], xpad.shape[3]

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            gxp = kernels.conv2d_backward_input(g, weight.data, stride, hp, wp)
            if padding:
                gxp = gxp[:, :, padding:hp - padding, padding:wp - padding]
            _accum(x, gxp)
        if weight.requires_grad:
            _accum(weight, kernels.conv2d_backward_kernel(g, xpad, kh, kw, stride))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _make(out_data, (x, weight, bias), bwd)


def bilinear_sample(feat, coords):
    """Sample feat[C,H,W] at coords[N,2] (x, y) with border-clamped corners.

    Gradients flow to the feature values only; coordinates are constants.
    Out-of-range coordinates read the clamped border pixels.
    """
    feat = as_variable(feat)
    coords = np.ascontiguousarray(np.asarray(coords, dtype=np.float64))
    if feat.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("bilinear_sample expects feat[C,H,W] and coords[N,2]")
    if not np.isfinite(coords).all():
        raise ValueError("bilinear_sample coords must be finite")
    cin, h, w = feat.shape
    out_data = kernels.bilinear_forward(feat.data, coords)

    def bwd(g):
        _accum(feat, kernels.bilinear_backward(np.ascontiguousarray(g), coords, cin, h, w))

    return _make(out_data, (feat,), bwd)


# ------------------------------------------------------- shape shuffling ---

def reshape(a, shape):
    a = as_variable(a)
    old = a.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def permute_chw_to_hwc(a):
    a = as_variable(a)
    if a.ndim != 3:
        raise ValueError("expected [C,H,W]")

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(2, 0, 1)))

    return _make(np.ascontiguousarray(a.data.transpose(1, 2, 0)), (a,), bwd)


def permute_hwc_to_chw(a):
    a = as_variable(a)
    if a.ndim != 3:
        raise ValueError("expected [H,W,C]")

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(1, 2, 0)))

    return _make(np.ascontiguousarray(a.data.transpose(2, 0, 1)), (a,), bwd)


def upsample_nearest(a, factor):
    """Nearest-neighbor upsample of the trailing two axes by an integer factor."""
    a = as_variable(a)
    if factor not in (2, 4):
        raise ValueError("upsample factor must be 2 or 4")
    out_data = np.repeat(np.repeat(a.data, factor, axis=-2), factor, axis=-1)

    def bwd(g):
        s = g.shape
        blocks = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        _accum(a, blocks.sum(axis=(-3, -1)))

    return _make(out_data, (a,), bwd)


def downsample_stride(a, factor):
    """Keep every factor-th sample of the trailing two axes, origin first."""
    a = as_variable(a)
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[..., ::factor, ::factor] = g
        _accum(a, gx)

    return _make(np.ascontiguousarray(a.data[..., ::factor, ::factor]), (a,), bwd)


def concat_channels(parts):
    """Concatenate [C,H,W] (or [B,C,H,W]) variables along the channel axis."""
    parts = [as_variable(p) for p in parts]
    axis = parts[0].ndim - 3
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = (slice(None),) * axis + (slice(lo, hi),)
            _accum(p, g[idx])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


# -------------------------------------------- attention-specific contractions ---

def dot_lastdim(a, b):
    """out[p,n,k] = sum_m a[p,m] * b[p,n,k,m]."""
    a, b = as_variable(a), as_variable(b)
    if a.ndim != 2 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[1] != b.shape[3]:
        raise ValueError(f"dot_lastdim shapes incompatible: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, np.einsum("pnk,pnkm->pm", g, b.data, optimize=True))
        _accum(b, np.einsum("pnk,pm->pnkm", g, a.data, optimize=True))

    return _make(np.einsum("pm,pnkm->pnk", a.data, b.data, optimize=True), (a, b), bwd)


def select_codes(valid, code_in, code_out):
    """Broadcast code_in where valid[p,n,k] else code_out -> [P,n,K,m]."""
    code_in, code_out = as_variable(code_in), as_variable(code_out)
    valid = np.asarray(valid, dtype=bool)
    if valid.ndim != 3 or code_in.ndim != 1 or code_in.shape != code_out.shape:
        raise ValueError("select_codes expects valid[P,n,K] and two [m] codes")
    mask = valid[..., None]
    out_data = np.where(mask, code_in.data, code_out.data)

    def bwd(g):
        _accum(code_in, np.where(mask, g, 0.0).sum(axis=(0, 1, 2)))
        _accum(code_out, np.where(mask, 0.0, g).sum(axis=(0, 1, 2)))

    return _make(out_data, (code_in, code_out), bwd)


def mul_codes(v, codes):
    """out[p,n,k,m] = v[p,n,k,m] * codes[k,m]."""
    v, codes = as_variable(v), as_variable(codes)
    if v.ndim != 4 or codes.ndim != 2 or v.shape[2] != codes.shape[0] or v.shape[3] != codes.shape[1]:
        raise ValueError(f"mul_codes shapes incompatible: {v.shape} vs {codes.shape}")

    def bwd(g):
        _accum(v, g * codes.data[None, None])
        _accum(codes, np.einsum("pnkm,pnkm->km", g, v.data, optimize=True))

    return _make(v.data * codes.data[None, None], (v, codes), bwd)


def weighted_sum_views(weights, x):
    """out[p,m] = sum_{n,k} weights[p,n,k] * x[p,n,k,m]."""
    weights, x = as_variable(weights), as_variable(x)
    if weights.shape != x.shape[:3]:
        raise ValueError(f"weighted_sum_views shapes incompatible: {weights.shape} vs {x.shape}")

    def bwd(g):
        _accum(weights, np.einsum("pm,pnkm->pnk", g, x.data, optimize=True))
        _accum(x, np.einsum("pnk,pm->pnkm", weights.data, g, optimize=True))

    return _make(np.einsum("pnk,pnkm->pm", weights.data, x.data, optimize=True), (weights, x), bwd)


def expect_lastdim(p, values):
    """out[...] = sum_k p[..., k] * values[k], values constant."""
    p = as_variable(p)
    values = np.asarray(values, dtype=np.float64)
    if p.shape[-1] != values.shape[0]:
        raise ValueError("expect_lastdim length mismatch")

    def bwd(g):
        _accum(p, g[..., None] * values)

    return _make(p.data @ values, (p,), bwd)
