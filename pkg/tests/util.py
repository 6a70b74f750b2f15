"""Shared test helpers: finite-difference checks and a scalar attention oracle."""

import math

import numpy as np

from epidepth.autodiff import Tape


def numeric_gradient(make_loss, var, eps=1e-4):
    """Central-difference gradient of make_loss() w.r.t. var.data, in place."""
    flat = var.data.ravel()
    num = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(make_loss().data)
        flat[i] = orig - eps
        fm = float(make_loss().data)
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * eps)
    return num.reshape(var.shape)


def relative_error(analytic, numeric):
    # floor keeps exactly-zero gradients (e.g. shift-invariant softmax bias)
    # from dividing finite-difference noise by itself
    denom = max(np.abs(analytic).max() + np.abs(numeric).max(), 1e-6)
    return np.abs(analytic - numeric).max() / denom


def attention_scalar_reference(src_stream, src_match, ref_feats, valid, params,
                               view_mean=False):
    """Triple-loop attention evaluation, one pixel/view/hypothesis at a time.

    Written independently of the vectorized module: plain dot products,
    per-(pixel, view) softmax via math.exp, explicit mask-code selection.
    """
    p_total, n, k, m = ref_feats.shape
    f0w, f0b = params.f0_w.data, params.f0_b.data
    frw, frb = params.fref_w.data, params.fref_b.data
    a0w, a0b = params.a0_w.data, params.a0_b.data
    a1w, a1b = params.a1_w.data, params.a1_b.data
    codes = params.depth_codes.data
    out = np.zeros((p_total, m))
    weights = np.zeros((p_total, n, k))
    for pi in range(p_total):
        q = f0w @ src_match[pi] + f0b
        acc = src_stream[pi] + a0w @ src_stream[pi] + a0b + a1w @ src_match[pi] + a1b
        attn = np.zeros(m)
        for vi in range(n):
            logits = []
            for ki in range(k):
                r = frw @ ref_feats[pi, vi, ki] + frb
                w = sum(q[d] * r[d] for d in range(m))
                logits.append(w / math.sqrt(m))
            peak = max(logits)
            exps = [math.exp(l - peak) for l in logits]
            total = sum(exps)
            for ki in range(k):
                wgt = exps[ki] / total
                weights[pi, vi, ki] = wgt
                if params.mask_encoding:
                    v = params.v_in.data if valid[pi, vi, ki] else params.v_out.data
                else:
                    v = np.ones(m)
                attn = attn + wgt * (v * codes[ki])
        if view_mean:
            attn = attn / n
        out[pi] = acc + attn
    return out, weights


def check_gradients(make_loss, variables, eps=1e-4, tol=1e-5):
    """Assert analytic grads of make_loss() match central differences.

    ``make_loss`` must rebuild the graph from the same Variable objects on
    every call; the relative error is the inf-norm gap normalized by the
    combined gradient scale.
    """
    for v in variables:
        v.grad = None
    with Tape() as tape:
        loss = make_loss()
        tape.backward(loss)
    worst = 0.0
    for v in variables:
        assert v.grad is not None, "gradient was not populated"
        num = numeric_gradient(make_loss, v, eps)
        err = relative_error(v.grad, num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} >= {tol}"
    return worst
