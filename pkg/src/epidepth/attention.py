"""Epipolar attention: score reference samples along hypothesis rays and mix
validity-gated depth codes back into the source feature stream.

For source pixel p with stream activation F(p) and matching activation G(p),
and reference matching features sampled at the K hypothesis projections in
each of n views, the update is

    out(p) = F(p) + A0 F(p) + A1 G(p)
             + sum_i sum_k softmax_k(w_ik / sqrt(m)) * (v_ik * c_k)

where w_ik = <f0 G(p), f_ref G_i(p_ik)>, v_ik is the in/out-of-view mask code
and c_k the depth code of hypothesis k.  The softmax normalizes over
hypotheses separately for every (pixel, view) pair.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ComputationError

CODE_KINDS = ("uniform", "linear", "cosine", "learned")
COSINE_CODE_SCALE = 1.0


@dataclass
class AttentionParams:
    """Trainable pieces of one attention module at feature width m."""

    f0_w: Variable
    f0_b: Variable
    fref_w: Variable
    fref_b: Variable
    a0_w: Variable
    a0_b: Variable
    a1_w: Variable
    a1_b: Variable
    v_in: Variable
    v_out: Variable
    depth_codes: Variable
    mask_encoding: bool = True

    @property
    def feature_dim(self):
        return self.f0_w.shape[0]

    @property
    def hypothesis_count(self):
        return self.depth_codes.shape[0]

    def named(self, prefix):
        """Checkpoint naming: every buffer under ``prefix``."""
        fields = ["f0_w", "f0_b", "fref_w", "fref_b", "a0_w", "a0_b",
                  "a1_w", "a1_b", "v_in", "v_out", "depth_codes"]
        return {f"{prefix}.{f}": getattr(self, f) for f in fields}

    def trainable(self):
        return [v for v in (self.f0_w, self.f0_b, self.fref_w, self.fref_b,
                            self.a0_w, self.a0_b, self.a1_w, self.a1_b,
                            self.v_in, self.v_out, self.depth_codes)
                if v.requires_grad]


def make_depth_codes(kind, hypotheses, m, rng):
    """Build the [K, m] depth-code table; returns (codes, trainable).

    uniform: one shared random row; linear: a random base row scaled by the
    hypothesis depth; cosine: fixed sinusoid over the hypothesis index;
    learned: free parameters (the only trainable kind).
    """
    if kind not in CODE_KINDS:
        raise ValueError(f"unknown depth code kind {kind!r}; expected one of {CODE_KINDS}")
    k = hypotheses.values.shape[0]
    if kind == "uniform":
        base = rng.normal(0.0, 0.02, m)
        return np.tile(base, (k, 1)), False
    if kind == "linear":
        base = rng.normal(0.0, 0.02, m)
        return hypotheses.values[:, None] * base[None, :], False
    if kind == "cosine":
        if m % 2:
            raise ValueError("cosine codes need an even feature width")
        pos = np.arange(k, dtype=np.float64)[:, None]
        # geometric frequency ladder spanning just-below-Nyquist down to one
        # half-cycle over the table, so every channel varies across the k
        # hypotheses actually present (the classic 10000^(2j/m) ladder leaves
        # half the channels constant for tables this short)
        j = np.arange(m // 2, dtype=np.float64)[None, :]
        omega = np.pi * np.power(float(k), -(j + 1.0) / (m // 2))
        angle = pos * omega
        codes = np.empty((k, m))
        codes[:, 0::2] = np.sin(angle)
        codes[:, 1::2] = np.cos(angle)
        return COSINE_CODE_SCALE * codes, False
    return rng.normal(0.0, 0.02, (k, m)), True


def init_attention_params(m, hypotheses, rng, code_kind="learned", mask_encoding=True):
    """Fan-in-uniform linear maps; sigma=0.02 Gaussian codes and mask vectors."""
    bound = 1.0 / np.sqrt(m)

    def lin():
        w = Variable(rng.uniform(-bound, bound, (m, m)), requires_grad=True)
        b = Variable(rng.uniform(-bound, bound, m), requires_grad=True)
        return w, b

    f0_w, f0_b = lin()
    fref_w, fref_b = lin()
    a0_w, a0_b = lin()
    a1_w, a1_b = lin()
    v_in = Variable(rng.normal(0.0, 0.02, m), requires_grad=True)
    v_out = Variable(rng.normal(0.0, 0.02, m), requires_grad=True)
    codes, trainable = make_depth_codes(code_kind, hypotheses, m, rng)
    depth_codes = Variable(codes, requires_grad=trainable)
    return AttentionParams(f0_w, f0_b, fref_w, fref_b, a0_w, a0_b, a1_w, a1_b,
                           v_in, v_out, depth_codes, mask_encoding)


def disable_mask_encoding(params):
    """Ablation: the returned params feed all-ones in place of the mask codes."""
    return replace(params, mask_encoding=False)


def _check_finite(arr, stage):
    if not np.isfinite(arr).all():
        raise ComputationError(f"attention stage {stage!r} produced non-finite values")


def matching_scores(src_feat, ref_feats, params):
    """Raw scores w[p,i,k] = <f0(src[p]), f_ref(ref[p,i,k])> (unscaled)."""
    if src_feat.shape[-1] != params.feature_dim or ref_feats.shape[-1] != params.feature_dim:
        raise ValueError("feature width does not match attention params")
    q = ad.linear(src_feat, params.f0_w, params.f0_b)
    r = ad.linear(ref_feats, params.fref_w, params.fref_b)
    scores = ad.dot_lastdim(q, r)
    _check_finite(scores.data, "matching_scores")
    return scores


def select_mask_codes(valid, params):
    """v_in where the sample is valid, v_out where it is not; ones if disabled."""
    if not params.mask_encoding:
        m = params.feature_dim
        shape = valid.shape + (m,)
        return Variable(np.ones(shape))
    return ad.select_codes(valid, params.v_in, params.v_out)


def epipolar_attention(src_stream, src_match, ref_feats, valid, params, view_mean=False):
    """Combined update; returns (out[P,m], softmax weights[P,n,K]).

    ``src_stream`` is the activation being transformed (identity-skipped);
    ``src_match`` is the source's matching-network activation at the same
    resolution.  ``ref_feats`` are matching features already sampled at the
    epipolar locations; ``valid`` is the grid's validity mask.
    """
    scores = matching_scores(src_match, ref_feats, params)
    logits = ad.mul(scores, 1.0 / np.sqrt(params.feature_dim))
    weights = ad.softmax_lastdim(logits)
    _check_finite(weights.data, "softmax_weights")
    coded = ad.mul_codes(select_mask_codes(valid, params), params.depth_codes)
    attn = ad.weighted_sum_views(weights, coded)
    if view_mean:
        attn = ad.mul(attn, 1.0 / valid.shape[1])
    skip = ad.add(src_stream, ad.linear(src_stream, params.a0_w, params.a0_b))
    out = ad.add(ad.add(skip, ad.linear(src_match, params.a1_w, params.a1_b)), attn)
    _check_finite(out.data, "combined_update")
    return out, weights
