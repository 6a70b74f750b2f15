"""Multiply-accumulate accounting: attention update vs cost-volume 3D conv.

The headline speedup C*K*k^3 / (C*k^2 + K) compares, per pixel and output
channel, one 3D convolution layer over a K-deep cost volume against a 2D
convolution plus the attention overhead.  The measured counters below itemize
every multiply the implemented update actually performs, assuming the
efficient schedule: the reference-side linear map runs on each view's feature
map once, before epipolar sampling, never per hypothesis.  (The two orders
commute exactly because a linear map distributes over the convex bilinear
weights, so this is a free reordering, not an approximation.)
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class MacCount:
    terms: tuple          # ((name, count), ...)

    @property
    def total(self):
        return sum(c for _, c in self.terms)


def attention_layer_macs(height, width, channels, hypotheses, views=1,
                         kernel=3):
    """MACs of one attention-augmented 2D stage on a [C, h, w] map."""
    p = height * width
    c, k, n, kk = channels, hypotheses, views, kernel
    terms = (
        ("conv2d", p * c * c * kk * kk),
        ("query_map", p * c * c),
        ("reference_maps", n * p * c * c),
        ("skip_self_map", p * c * c),
        ("skip_match_map", p * c * c),
        ("bilinear_sampling", 4 * n * p * k * c),
        ("matching_scores", n * p * k * c),
        ("logit_scaling", n * p * k),
        ("softmax_normalize", n * p * k),
        ("code_modulation", n * p * k * c),
        ("hypothesis_mix", n * p * k * c),
    )
    return MacCount(terms)


def cost_volume_conv3d_macs(height, width, channels, hypotheses, kernel=3):
    """MACs of one C-to-C 3D convolution over a [C, K, h, w] cost volume."""
    count = height * width * hypotheses * channels * channels * kernel**3
    return MacCount((("conv3d", count),))


def analytic_speedup(channels, hypotheses, kernel=3):
    """Per-pixel, per-output-channel cost ratio of the two designs."""
    return (channels * hypotheses * kernel**3
            / (channels * kernel**2 + hypotheses))


def measured_speedup(height, width, channels, hypotheses, views=1, kernel=3):
    conv3d = cost_volume_conv3d_macs(height, width, channels, hypotheses,
                                     kernel).total
    attn = attention_layer_macs(height, width, channels, hypotheses, views,
                                kernel).total
    return conv3d / attn
