"""Depth network: residual 2D encoder-decoder with epipolar attention taps.

Layout (feature stride in parentheses):

    encoder   stage0 (1) -> stage1 (2) -> stage2 (4) -> stage3 (8)
    decoder   up(stage3) + skip(stage2) -> dec (4)
    volume    3 convs down to (16), 3 upsample+convs back to (4) -> K' logits
    output    softmax -> soft-argmax -> nearest x4 + learned residual

Attention can tap sites 1-3 (the matching encoder outputs at strides 2/4/8)
and site 4 (the decoder output at stride 4).  The matching network G is a
second encoder with identical topology; reference views only ever pass
through G.  With no attention sites configured the reference inputs are never
touched, so single-view outputs are bit-identical with or without them.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry
from .attention import epipolar_attention, init_attention_params
from .autodiff import Variable

_SITE_STAGE = {1: 1, 2: 2, 3: 3, 4: 2}   # site -> encoder stage giving (stride, width)


@dataclass(frozen=True)
class NetworkConfig:
    image_size: tuple = (48, 64)
    in_channels: int = 1
    channels: tuple = (8, 16, 32, 48)
    volume_channels: int = 32
    head_channels: int = 8
    attention_layers: frozenset = frozenset({2})
    hypothesis_count: int = 16
    depth_min: float = 0.5
    depth_max: float = 8.0
    depth_code_kind: str = "learned"
    endpoint_inclusive: bool = True
    volume_bins: int = 0              # 0 means hypothesis_count
    view_mean: bool = False
    mask_encoding: bool = True
    confidence_head: bool = False

    def __post_init__(self):
        h, w = self.image_size
        if h % 16 or w % 16:
            raise ValueError(f"image size {self.image_size} must be divisible by 16")
        if len(self.channels) != 4:
            raise ValueError("channels must list the four encoder stage widths")
        if not set(self.attention_layers) <= set(_SITE_STAGE):
            raise ValueError(f"attention sites must be within {sorted(_SITE_STAGE)}")
        if self.hypothesis_count < 2:
            raise ValueError("need at least 2 depth hypotheses")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("require 0 < depth_min < depth_max")
        object.__setattr__(self, "attention_layers", frozenset(self.attention_layers))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "image_size", tuple(self.image_size))

    @property
    def bins(self):
        return self.volume_bins or self.hypothesis_count

    def site_stride(self, site):
        return 2 ** _SITE_STAGE[site]

    def site_width(self, site):
        return self.channels[_SITE_STAGE[site]]

    def hypotheses(self):
        return geometry.sample_depth_hypotheses(
            self.hypothesis_count, self.depth_min, self.depth_max, self.endpoint_inclusive)

    def bin_values(self):
        if self.bins == self.hypothesis_count:
            return self.hypotheses().values
        return geometry.sample_depth_hypotheses(
            self.bins, self.depth_min, self.depth_max, self.endpoint_inclusive).values


def config_ours(**kw):
    kw.setdefault("attention_layers", frozenset({2}))
    return NetworkConfig(**kw)


def config_ours_robust(**kw):
    kw.setdefault("attention_layers", frozenset({1, 2, 3, 4}))
    return NetworkConfig(**kw)


def config_mono(**kw):
    kw.setdefault("attention_layers", frozenset())
    return NetworkConfig(**kw)


@dataclass
class DepthPrediction:
    depth_quarter: Variable
    depth_full: Variable
    probability_volume: Variable
    confidence: Variable = None
    attention_weights: dict = field(default_factory=dict)
    grid_builds: int = 0


# ------------------------------------------------------------- parameters ---

def _conv_init(rng, cout, cin, k):
    bound = 1.0 / np.sqrt(cin * k * k)
    w = Variable(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True)
    b = Variable(rng.uniform(-bound, bound, cout), requires_grad=True)
    return w, b


def _block_params(params, rng, prefix, cin, cout, stride):
    params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"] = _conv_init(rng, cout, cin, 3)
    params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"] = _conv_init(rng, cout, cout, 3)
    if cin != cout or stride != 1:
        params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"] = _conv_init(rng, cout, cin, 1)


def init_parameters(config, rng):
    """Build the full named parameter dict for a config."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    params = {}
    c0, c1, c2, c3 = config.channels
    widths = [config.in_channels, c0, c1, c2, c3]
    for stage in range(4):
        stride = 1 if stage == 0 else 2
        _block_params(params, rng, f"feat.enc{stage}", widths[stage], widths[stage + 1], stride)
    _block_params(params, rng, "feat.dec", c3 + c2, c2, 1)

    if config.attention_layers:
        for stage in range(4):
            stride = 1 if stage == 0 else 2
            _block_params(params, rng, f"match.enc{stage}", widths[stage], widths[stage + 1], stride)
        hyp = config.hypotheses()
        attn = {}
        for site in sorted(config.attention_layers):
            ap = init_attention_params(config.site_width(site), hyp, rng,
                                       code_kind=config.depth_code_kind,
                                       mask_encoding=config.mask_encoding)
            params.update(ap.named(f"attn.site{site}"))
            attn[site] = ap
        params["__attention__"] = attn  # object view of the same Variables

    cv = config.volume_channels
    params["vol.c1.w"], params["vol.c1.b"] = _conv_init(rng, cv, c2, 3)
    params["vol.c2.w"], params["vol.c2.b"] = _conv_init(rng, cv, cv, 3)
    params["vol.c3.w"], params["vol.c3.b"] = _conv_init(rng, cv, cv, 3)
    params["vol.u1.w"], params["vol.u1.b"] = _conv_init(rng, cv, cv, 3)
    params["vol.u2.w"], params["vol.u2.b"] = _conv_init(rng, cv, cv, 3)
    params["vol.out.w"], params["vol.out.b"] = _conv_init(rng, config.bins, cv, 3)

    hc = config.head_channels
    params["head.r1.w"], params["head.r1.b"] = _conv_init(rng, hc, c2 + c0, 3)
    params["head.res.w"] = Variable(np.zeros((1, hc, 3, 3)), requires_grad=True)
    params["head.res.b"] = Variable(np.zeros(1), requires_grad=True)
    if config.confidence_head:
        params["head.conf.w"], params["head.conf.b"] = _conv_init(rng, 1, hc, 3)
    return params


def trainable_parameters(params):
    return {k: v for k, v in params.items()
            if isinstance(v, Variable) and v.requires_grad}


def checkpoint_buffers(params):
    return {k: v for k, v in params.items() if isinstance(v, Variable)}


# ----------------------------------------------------------------- forward ---

def _res_block(x, params, prefix, stride):
    h = ad.relu(ad.conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"],
                          stride=stride, padding=1))
    h = ad.conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"],
                  stride=1, padding=1)
    if f"{prefix}.proj.w" in params:
        skip = ad.conv2d(x, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"],
                         stride=stride, padding=0)
    else:
        skip = x
    return ad.relu(ad.add(h, skip))


def _as_batched_image(image):
    data = np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValueError(f"image must be [H,W] or [C,H,W], got shape {data.shape}")
    return Variable(data[None])


def _encoder(x, params, prefix):
    stages = []
    for stage in range(4):
        x = _res_block(x, params, f"{prefix}.enc{stage}", 1 if stage == 0 else 2)
        stages.append(x)
    return stages


def feature_net_forward(image, config, params):
    """Matching-network (G) activations at strides 1, 2, 4, 8."""
    return _encoder(_as_batched_image(image), params, "match")


def soft_argmax_depth(prob_volume, values):
    """Expected depth under the per-pixel distribution over bins."""
    return ad.expect_lastdim(prob_volume, values)


def residual_upsample(depth_quarter, residual):
    """Nearest x4 upsample of the coarse depth plus a full-resolution residual."""
    hq, wq = depth_quarter.shape
    coarse = ad.upsample_nearest(ad.reshape(depth_quarter, (1, hq, wq)), 4)
    return ad.add(ad.reshape(coarse, residual.shape), residual)


def _map_to_rows(x):
    """[1,C,hs,ws] -> [hs*ws, C] in lattice (row-major y, x) order."""
    _, c, hs, ws = x.shape
    return ad.reshape(ad.permute_chw_to_hwc(ad.reshape(x, (c, hs, ws))), (hs * ws, c))


def _rows_to_map(rows, hs, ws):
    c = rows.shape[1]
    return ad.reshape(ad.permute_hwc_to_chw(ad.reshape(rows, (hs, ws, c))), (1, c, hs, ws))


def _apply_attention(x, site, grid, src_match_stage, ref_match_stages, attn_params,
                     config, record):
    _, m, hs, ws = x.shape
    p_total, n, k = grid.valid.shape
    stream_rows = _map_to_rows(x)
    match_rows = _map_to_rows(src_match_stage)
    view_feats = []
    for i in range(n):
        coords = grid.pixels[:, i].reshape(p_total * k, 2)
        sampled = ad.bilinear_sample(ad.reshape(ref_match_stages[i], (m, hs, ws)), coords)
        view_feats.append(ad.reshape(sampled, (p_total, 1, k, m)))
    refs = view_feats[0] if n == 1 else ad.concat_channels(view_feats)
    out_rows, weights = epipolar_attention(stream_rows, match_rows, refs, grid.valid,
                                           attn_params, view_mean=config.view_mean)
    if record is not None:
        record[site] = (weights.data.copy(), grid)
    return _rows_to_map(out_rows, hs, ws)


def build_attention_grids(config, intrinsics, poses):
    """Epipolar grids for every stride the config's attention sites use.

    Train loops call this once per sample and pass the result to
    ``depth_net_forward`` so repeated steps skip the projection work.
    """
    hyp = config.hypotheses()
    return {stride: geometry.build_epipolar_grid(intrinsics, poses, hyp,
                                                 config.image_size, stride=stride)
            for stride in sorted({config.site_stride(s)
                                  for s in config.attention_layers})}


def depth_net_forward(image, ref_images, intrinsics, poses, config, params,
                      record_attention=False, grids=None):
    """Full forward pass producing a DepthPrediction.

    ``poses`` map the source camera frame into each reference view's frame;
    ``ref_images`` come in the same order.  For a config without attention
    sites the reference arguments may be empty lists.
    """
    h, w = config.image_size
    x = _as_batched_image(image)
    if x.shape[2:] != (h, w):
        raise ValueError(f"image shape {x.shape[2:]} does not match config {config.image_size}")
    sites = sorted(config.attention_layers)
    record = {} if record_attention else None
    grid_builds = 0

    src_match = ref_match = None
    if sites:
        if len(ref_images) != len(poses):
            raise ValueError("need one pose per reference image")
        if not ref_images:
            raise ValueError("attention config requires at least one reference view")
        if grids is None:
            grids = build_attention_grids(config, intrinsics, poses)
            grid_builds = len(grids)
        elif any(config.site_stride(s) not in grids for s in sites):
            raise ValueError("supplied grids are missing a needed stride")
        src_match = feature_net_forward(image, config, params)
        ref_match = [feature_net_forward(ri, config, params) for ri in ref_images]

    attn = params.get("__attention__", {})
    stages = []
    xcur = x
    for stage in range(4):
        xcur = _res_block(xcur, params, f"feat.enc{stage}", 1 if stage == 0 else 2)
        site = stage if stage in sites else None
        if site is not None:
            stage_idx = _SITE_STAGE[site]
            xcur = _apply_attention(
                xcur, site, grids[config.site_stride(site)], src_match[stage_idx],
                [rm[stage_idx] for rm in ref_match], attn[site], config, record)
        stages.append(xcur)

    up = ad.upsample_nearest(stages[3], 2)
    dec = _res_block(ad.concat_channels([up, stages[2]]), params, "feat.dec", 1)
    if 4 in sites:
        dec = _apply_attention(dec, 4, grids[4], src_match[2],
                               [rm[2] for rm in ref_match], attn[4], config, record)

    v = ad.relu(ad.conv2d(dec, params["vol.c1.w"], params["vol.c1.b"], padding=1))
    v = ad.relu(ad.conv2d(v, params["vol.c2.w"], params["vol.c2.b"], stride=2, padding=1))
    v = ad.relu(ad.conv2d(v, params["vol.c3.w"], params["vol.c3.b"], stride=2, padding=1))
    v = ad.relu(ad.conv2d(ad.upsample_nearest(v, 2), params["vol.u1.w"], params["vol.u1.b"], padding=1))
    v = ad.relu(ad.conv2d(ad.upsample_nearest(v, 2), params["vol.u2.w"], params["vol.u2.b"], padding=1))
    logits = ad.conv2d(v, params["vol.out.w"], params["vol.out.b"], padding=1)

    hq, wq = h // 4, w // 4
    volume = ad.softmax_lastdim(ad.permute_chw_to_hwc(ad.reshape(logits, (config.bins, hq, wq))))
    depth_quarter = soft_argmax_depth(volume, config.bin_values())

    r0 = ad.upsample_nearest(dec, 4)
    r1 = ad.relu(ad.conv2d(ad.concat_channels([r0, stages[0]]),
                           params["head.r1.w"], params["head.r1.b"], padding=1))
    residual = ad.conv2d(r1, params["head.res.w"], params["head.res.b"], padding=1)
    depth_full = ad.clamp_min(
        residual_upsample(depth_quarter, ad.reshape(residual, (h, w))), 1e-6)

    confidence = None
    if config.confidence_head:
        raw = ad.conv2d(r1, params["head.conf.w"], params["head.conf.b"], padding=1)
        confidence = ad.exp(ad.reshape(raw, (h, w)))

    return DepthPrediction(depth_quarter, depth_full, volume, confidence,
                           record or {}, grid_builds)
