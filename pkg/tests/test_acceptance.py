"""Release gate: eleven end-to-end checks covering gradients, attention,
geometry, training behaviour, complexity accounting, metrics and fusion.

Every test computes its verdict, records it in RESULTS, and only then
asserts, so a full run always ends with one PASS/FAIL line per criterion
(printed by the conftest summary hook) even when an earlier criterion fails.

The held-out comparisons (criteria 5, 6, 9) score configurations of one
network family on the same five scenes; training has no hidden randomness,
so every cached run is reproducible bit for bit and the single expensive
"ours" run serves as criterion 5's attention arm, criterion 6's learned-code
arm and criterion 9's clean arm at once.
"""

import math
import time
from dataclasses import replace
from functools import lru_cache
from statistics import median

import numpy as np

from epidepth import autodiff as ad
from epidepth import (complexity, fusion, geometry, metrics, network, perturb,
                      scene, training)
from epidepth.attention import (CODE_KINDS, epipolar_attention,
                                init_attention_params)
from epidepth.autodiff import Tape, Variable
from epidepth.network import depth_net_forward
from epidepth.pnp import rodrigues

from test_autodiff import OP_CASES
from util import attention_scalar_reference, check_gradients

CRITERIA = {
    1: "operator and full-network gradients match central differences",
    2: "vectorized attention equals the scalar reference",
    3: "geometry round-trips, hypothesis spacing, validity boundaries",
    4: "one-scene overfit reaches masked AbsRel < 0.05",
    5: "attention beats the attention-free baseline on held-out views",
    6: "uniform depth codes trail cosine and learned codes",
    7: "mask encoding helps when epipolar samples leave the view",
    8: "attention vs 3D-conv MAC ratio within 2x of the formula",
    9: "exact pose recovery; multi-scale degrades less under noise",
    10: "metrics equal the scalar oracle and closed-form identities",
    11: "fusion support counts and min_views monotonicity",
}
RESULTS = {}


def record(num, passed, detail):
    RESULTS[num] = (bool(passed), detail)
    return bool(passed)


# --------------------------------------------------- shared training bank ---

FAMILY_SEEDS = (1, 2, 3, 4, 5)
SITES_OURS = frozenset({2})
SITES_ROBUST = frozenset({1, 2, 3, 4})
SITES_MONO = frozenset()


@lru_cache(maxsize=None)
def family_scene(seed):
    # eight views: seven training sources plus a held-out eighth; many views
    # burden a per-scene memorizing shortcut far more than the matching
    # pathway, which is what separates the designs at this scale
    params = scene.SceneParams(image_size=(32, 32), view_count=8, focal=40.0,
                               baseline=1.4)
    return scene.generate_scene(params, 200 + seed)


@lru_cache(maxsize=None)
def noisy_pose_bank(seed):
    """Per-source-view perturbed poses under 10 px observation noise."""
    sc = family_scene(seed)
    return {v: tuple(r.pose for r in
                     perturb.perturb_scene(sc, noise_px=10.0,
                                           seed=(900 + seed) * 100 + v,
                                           source_view=v))
            for v in range(len(sc.images))}


def family_config(code_kind, sites, depth_min=1.0, depth_max=8.0,
                  mask_encoding=True):
    return network.NetworkConfig(image_size=(32, 32), channels=(4, 8, 16, 24),
                                 volume_channels=8, head_channels=8,
                                 hypothesis_count=16, depth_min=depth_min,
                                 depth_max=depth_max,
                                 depth_code_kind=code_kind,
                                 attention_layers=sites,
                                 mask_encoding=mask_encoding)


def train_then_score_held_out(sc, cfg, seed, steps, decay_step,
                              poses_by_view=None):
    """Train on all views but the last, report AbsRel on the held-out one.

    ``poses_by_view`` swaps every sample's poses (training and evaluation
    alike) for a perturbed set, modelling a pipeline whose upstream pose
    estimates are noisy end to end.
    """
    held = len(sc.images) - 1
    samples = training.samples_from_scene(sc, source_views=tuple(range(held)))
    if poses_by_view is not None:
        samples = [replace(s, poses=poses_by_view[v])
                   for v, s in enumerate(samples)]
    tc = training.TrainConfig(steps=steps, learning_rate=3e-3,
                              decay_steps=(decay_step,), seed=seed)
    res = training.train(samples, cfg, tc)
    s = training.samples_from_scene(sc, source_views=(held,))[0]
    poses = s.poses if poses_by_view is None else poses_by_view[held]
    pred = depth_net_forward(s.image, s.ref_images, s.intrinsics, poses,
                             cfg, res.params)
    return metrics.evaluate(pred.depth_full.data, sc.depths[held]).abs_rel


@lru_cache(maxsize=None)
def held_out_abs_rel(seed, code_kind, sites, noisy):
    bank = noisy_pose_bank(seed) if noisy else None
    return train_then_score_held_out(family_scene(seed),
                                     family_config(code_kind, sites),
                                     seed, steps=400, decay_step=320,
                                     poses_by_view=bank)


def ours(seed, noisy=False):
    return held_out_abs_rel(seed, "learned", SITES_OURS, noisy)


def robust(seed, noisy=False):
    return held_out_abs_rel(seed, "learned", SITES_ROBUST, noisy)


@lru_cache(maxsize=None)
def offview_scene(seed):
    # gaze point pulled close to the ring: reference cameras converge so
    # sharply that about half of all hypothesis projections leave the frame
    params = scene.SceneParams(image_size=(32, 32), view_count=6, focal=40.0,
                               baseline=1.4, look_distance=2.0,
                               min_overlap=0.25)
    return scene.generate_scene(params, 300 + seed)


@lru_cache(maxsize=None)
def offview_abs_rel(seed, mask_encoding):
    cfg = family_config("learned", SITES_OURS, depth_min=0.5, depth_max=12.0,
                        mask_encoding=mask_encoding)
    return train_then_score_held_out(offview_scene(seed), cfg, seed,
                                     steps=300, decay_step=240)


# -------------------------------------------------------------- criterion 1

def test_gradient_soundness_of_operators_and_full_network():
    t0 = time.perf_counter()
    failed_ops = []
    worst_op = 0.0
    for name in sorted(OP_CASES):
        make_loss, variables = OP_CASES[name]()
        try:
            worst_op = max(worst_op, check_gradients(make_loss, variables,
                                                     eps=1e-4, tol=1e-5))
        except AssertionError:
            failed_ops.append(name)

    cfg = network.config_ours(image_size=(16, 16), channels=(2, 3, 4, 4),
                              volume_channels=3, head_channels=2,
                              hypothesis_count=3, depth_min=0.5, depth_max=4.0)
    params = network.init_parameters(cfg, 5)
    rng = np.random.default_rng(5)
    image = rng.normal(size=(16, 16))
    refs = [rng.normal(size=(16, 16)), rng.normal(size=(16, 16))]
    intr = geometry.CameraIntrinsics.from_params(20.0, 20.0, 8.0, 8.0)
    poses = [geometry.RelativePose.from_rt(np.eye(3), np.array([0.5, 0.0, 0.0])),
             geometry.RelativePose.from_rt(np.eye(3), np.array([-0.4, 0.1, 0.0]))]
    proj = rng.normal(size=(16, 16))

    def make_loss():
        pred = depth_net_forward(image, refs, intr, poses, cfg, params)
        return ad.sum_all(ad.mul(pred.depth_full, proj))

    named = network.trainable_parameters(params)
    for var in named.values():
        var.grad = None
    with Tape() as tape:
        tape.backward(make_loss())

    # the network gradient is checked as one object (gap over combined scale,
    # the util.relative_error convention): per-tensor normalization would pit
    # O(eps^2) truncation noise against early-layer gradients of ~1e-4 scale
    eps = 1e-4
    gap_max, ana_max, num_max = 0.0, 0.0, 0.0
    for name in sorted(named):
        var = named[name]
        flat = var.data.ravel()
        picks = sorted({0, flat.size // 3, (2 * flat.size) // 3, flat.size - 1})
        grad = var.grad if var.grad is not None else np.zeros_like(var.data)
        analytic = grad.ravel()[picks]
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(make_loss().data)
            flat[i] = orig - eps
            fm = float(make_loss().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            gap_max = max(gap_max, abs(float(analytic[j]) - numeric))
            num_max = max(num_max, abs(numeric))
        ana_max = max(ana_max, float(np.abs(analytic).max()))
    worst_net = gap_max / max(ana_max + num_max, 1e-6)

    runtime = time.perf_counter() - t0
    ok = not failed_ops and worst_net < 1e-4 and runtime < 300.0
    record(1, ok, f"{len(OP_CASES)} operators worst {worst_op:.1e}; "
                  f"{len(named)} network tensors end-to-end {worst_net:.1e}; "
                  f"{runtime:.0f}s")
    assert not failed_ops, f"operators failed finite differences: {failed_ops}"
    assert worst_net < 1e-4
    assert runtime < 300.0


# -------------------------------------------------------------- criterion 2

def test_attention_matches_scalar_reference_on_random_instances():
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(200):
        p = int(rng.integers(1, 9))
        n = int(rng.integers(1, 3))
        k = int(rng.integers(2, 5))
        m = int(rng.choice((2, 4, 6)))
        hyp = geometry.sample_depth_hypotheses(k, 0.4, 7.0)
        params = init_attention_params(m, hyp, rng,
                                       code_kind=CODE_KINDS[i % len(CODE_KINDS)],
                                       mask_encoding=bool(i & 1))
        src_stream = Variable(rng.normal(size=(p, m)))
        src_match = Variable(rng.normal(size=(p, m)))
        ref_feats = Variable(rng.normal(size=(p, n, k, m)))
        valid = rng.random((p, n, k)) > 0.3
        view_mean = bool(i & 2)
        out, weights = epipolar_attention(src_stream, src_match, ref_feats,
                                          valid, params, view_mean=view_mean)
        oracle_out, oracle_w = attention_scalar_reference(
            src_stream.data, src_match.data, ref_feats.data, valid, params,
            view_mean=view_mean)
        worst = max(worst, float(np.abs(out.data - oracle_out).max()),
                    float(np.abs(weights.data - oracle_w).max()))
    ok = worst <= 1e-12
    record(2, ok, f"200 instances, worst gap {worst:.1e}")
    assert ok, f"vectorized attention drifted {worst:.3e} from the reference"


# -------------------------------------------------------------- criterion 3

def test_geometry_round_trips_spacing_and_validity_boundaries():
    rng = np.random.default_rng(3)
    intr = geometry.CameraIntrinsics.from_params(47.0, 52.0, 31.5, 23.5)
    pixels = np.column_stack([rng.uniform(0.0, 64.0, 400),
                              rng.uniform(0.0, 48.0, 400)])
    depths = rng.uniform(0.3, 9.0, 400)
    points = geometry.unproject(intr, pixels, depths)
    back, z = geometry.project_to_reference(
        intr, geometry.RelativePose.identity(), points)
    identity_err = max(float(np.abs(back - pixels).max()),
                       float(np.abs(z - depths).max()))

    pose = geometry.RelativePose.from_rt(
        rodrigues(np.array([0.05, 0.18, -0.07])), np.array([0.4, -0.25, 0.3]))
    pix_ref, z_ref = geometry.project_to_reference(intr, pose, points)
    lifted = geometry.unproject(intr, pix_ref, z_ref)
    posed_err = float(np.abs(pose.inverse().apply(lifted) - points).max())

    hyp = geometry.sample_depth_hypotheses(7, 0.4, 9.0)
    endpoint_err = max(abs(hyp.values[0] - 0.4), abs(hyp.values[-1] - 9.0))
    spacing = np.diff(1.0 / hyp.values)
    spacing_err = float(np.abs(spacing - spacing[0]).max())
    half_open = geometry.sample_depth_hypotheses(5, 1.0, 4.0,
                                                 endpoint_inclusive=False)
    half_err = max(abs(half_open.values[0] - 1.0),
                   float(np.abs(np.diff(1.0 / half_open.values)
                                - (0.25 - 1.0) / 5.0).max()))

    # boundary semantics are binary: 0 <= x < w, 0 <= y < h, depth >= 0
    px = np.array([[0.0, 0.0], [5.9999999, 3.0], [6.0, 3.0], [-1e-9, 2.0],
                   [3.0, 3.9999999], [3.0, 4.0], [np.nan, 2.0], [2.0, 1.0],
                   [2.0, 1.0], [2.0, 1.0]])
    dp = np.array([1.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 0.0, -1e-12, np.inf])
    want = np.array([True, True, False, False, True, False, False, True,
                     False, False])
    validity_ok = bool(np.array_equal(
        geometry.sample_validity(px, dp, (4, 6)), want))

    ok = (identity_err < 1e-9 and posed_err < 1e-9 and endpoint_err < 1e-12
          and spacing_err < 1e-12 and half_err < 1e-12 and validity_ok)
    record(3, ok, f"round-trip {max(identity_err, posed_err):.1e}, "
                  f"spacing {max(spacing_err, half_err):.1e}, "
                  f"boundaries {'exact' if validity_ok else 'WRONG'}")
    assert identity_err < 1e-9 and posed_err < 1e-9
    assert endpoint_err < 1e-12 and spacing_err < 1e-12 and half_err < 1e-12
    assert validity_ok


# -------------------------------------------------------------- criterion 4

def test_overfit_one_scene_to_low_masked_abs_rel():
    t0 = time.perf_counter()
    sc = scene.generate_scene(
        scene.SceneParams(image_size=(48, 64), view_count=3), 7)
    cfg = network.config_ours()
    samples = training.samples_from_scene(sc, source_views=(0,))
    tc = training.TrainConfig(steps=800, learning_rate=3e-3,
                              decay_steps=(600,), seed=0)
    res = training.train(samples, cfg, tc)
    s = samples[0]
    pred = depth_net_forward(s.image, s.ref_images, s.intrinsics, s.poses,
                             cfg, res.params)
    mask = np.isfinite(sc.depths[0]) & (sc.depths[0] > 0.0)
    abs_rel = metrics.evaluate(pred.depth_full.data, sc.depths[0], mask).abs_rel
    runtime = time.perf_counter() - t0
    ok = abs_rel < 0.05 and runtime < 900.0
    record(4, ok, f"masked AbsRel {abs_rel:.4f} after {tc.steps} steps, "
                  f"{runtime:.0f}s")
    assert abs_rel < 0.05, f"training view AbsRel {abs_rel:.4f}"
    assert runtime < 900.0


# -------------------------------------------------------------- criterion 5

def test_attention_beats_attention_free_on_held_out_views():
    ours_err = [ours(s) for s in FAMILY_SEEDS]
    mono_err = [held_out_abs_rel(s, "learned", SITES_MONO, False)
                for s in FAMILY_SEEDS]
    ok = median(ours_err) < median(mono_err)
    record(5, ok, f"median AbsRel ours {median(ours_err):.4f} "
                  f"vs mono {median(mono_err):.4f}")
    assert ok, f"ours {ours_err} not better than mono {mono_err}"


# -------------------------------------------------------------- criterion 6

def test_uniform_codes_trail_cosine_and_learned_codes():
    wins = 0
    rows = []
    for s in FAMILY_SEEDS:
        uniform = held_out_abs_rel(s, "uniform", SITES_OURS, False)
        cosine = held_out_abs_rel(s, "cosine", SITES_OURS, False)
        learned = ours(s)
        wins += uniform > cosine and uniform > learned
        rows.append(f"{uniform:.3f}>{cosine:.3f}/{learned:.3f}")
    ok = wins >= 4
    record(6, ok, f"uniform worst in {wins}/5 seeds ({', '.join(rows)})")
    assert ok, f"uniform codes were worst in only {wins}/5 seeds: {rows}"


# -------------------------------------------------------------- criterion 7

def test_mask_encoding_helps_when_samples_leave_the_view():
    hyp = geometry.sample_depth_hypotheses(16, 0.5, 12.0)
    invalid = []
    for s in FAMILY_SEEDS:
        sample = training.samples_from_scene(offview_scene(s), (0,))[0]
        grid = geometry.build_epipolar_grid(sample.intrinsics, sample.poses,
                                            hyp, (32, 32), stride=4)
        invalid.append(1.0 - float(grid.valid.mean()))
    wins = sum(offview_abs_rel(s, False) >= offview_abs_rel(s, True)
               for s in FAMILY_SEEDS)
    ok = min(invalid) >= 0.30 and wins >= 4
    record(7, ok, f"invalid fraction {min(invalid):.2f}, "
                  f"no-mask >= ours in {wins}/5 seeds")
    assert min(invalid) >= 0.30, f"scene family too tame: {invalid}"
    assert wins >= 4, f"mask encoding helped in only {wins}/5 seeds"


# -------------------------------------------------------------- criterion 8

def test_attention_mac_ratio_tracks_analytic_prediction():
    cfg = network.config_ours()
    h, w = (side // cfg.site_stride(2) for side in cfg.image_size)
    channels = cfg.site_width(2)
    hypotheses = cfg.hypothesis_count
    analytic = complexity.analytic_speedup(channels, hypotheses, kernel=3)
    measured = complexity.measured_speedup(h, w, channels, hypotheses,
                                           views=1, kernel=3)
    factor = max(analytic, measured) / min(analytic, measured)
    ok = factor < 2.0
    record(8, ok, f"measured {measured:.1f}x vs analytic {analytic:.1f}x, "
                  f"factor {factor:.2f}")
    assert ok, f"measured {measured:.2f} vs analytic {analytic:.2f}"


# -------------------------------------------------------------- criterion 9

def test_exact_pose_recovery_and_noise_robust_ordering():
    records = perturb.perturb_scene(family_scene(1), noise_px=0.0, seed=99)
    worst_rot = max(r.rotation_delta for r in records)
    worst_tra = max(r.translation_delta for r in records)
    exact = (all(r.accepted for r in records)
             and worst_rot < 1e-6 and worst_tra < 1e-6)

    wins = 0
    deltas = []
    for s in FAMILY_SEEDS:
        delta_ours = ours(s, noisy=True) - ours(s)
        delta_robust = robust(s, noisy=True) - robust(s)
        wins += delta_robust <= delta_ours
        deltas.append(f"{delta_ours:+.3f}/{delta_robust:+.3f}")
    ok = exact and wins >= 3
    record(9, ok, f"noise-free dR {worst_rot:.1e} dT {worst_tra:.1e}; "
                  f"robust <= ours in {wins}/5 seeds")
    assert exact, f"noise-free recovery off by dR {worst_rot}, dT {worst_tra}"
    assert wins >= 3, f"multi-scale degraded more in {5 - wins}/5 seeds: {deltas}"


# ------------------------------------------------------------- criterion 10

def _metrics_by_hand(pred, gt, mask, thresholds=(0.125, 0.25)):
    """Element loop straight off the metric definitions, plain math.*."""
    pairs = [(max(float(p), 1e-6), float(g))
             for p, g, keep in zip(pred.ravel(), gt.ravel(), mask.ravel())
             if keep]
    n = len(pairs)
    out = {
        "abs_rel": sum(abs(p - g) / g for p, g in pairs) / n,
        "sq_rel": sum((p - g) ** 2 / g for p, g in pairs) / n,
        "rmse": math.sqrt(sum((p - g) ** 2 for p, g in pairs) / n),
        "rmse_log": math.sqrt(sum((math.log(p) - math.log(g)) ** 2
                                  for p, g in pairs) / n),
        "log10": sum(abs(math.log10(p) - math.log10(g)) for p, g in pairs) / n,
        "abs_diff": math.sqrt(sum(abs(p - g) for p, g in pairs) / n),
        "mean_abs_diff": sum(abs(p - g) for p, g in pairs) / n,
    }
    for power in (1, 2, 3):
        bound = 1.25 ** power
        out[f"delta{power}"] = sum(
            1 for p, g in pairs if max(p / g, g / p) < bound) / n
    for x in thresholds:
        out[f"thre@{x}"] = sum(1 for p, g in pairs if abs(p - g) < x) / n
    return out


def test_metrics_match_scalar_oracle_and_closed_forms():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        h, w = int(rng.integers(2, 11)), int(rng.integers(2, 11))
        gt = rng.uniform(0.2, 6.0, (h, w))
        pred = gt * rng.uniform(0.6, 1.7, (h, w)) + rng.normal(0.0, 0.05, (h, w))
        mask = rng.random((h, w)) > 0.25
        if not mask.any():
            mask[0, 0] = True
        report = metrics.evaluate(pred, gt, mask)
        want = _metrics_by_hand(pred, gt, mask)
        got = {name: getattr(report, name) for name in want if "@" not in name}
        got.update({f"thre@{x}": frac for x, frac in report.thresholds})
        for name, value in want.items():
            worst = max(worst, abs(got[name] - value))
    oracle_ok = worst <= 1e-12

    gt = rng.uniform(0.5, 5.0, (9, 13))
    same = metrics.evaluate(gt, gt)
    doubled = metrics.evaluate(2.0 * gt, gt)
    halved = metrics.evaluate(0.5 * gt, gt)
    near = metrics.evaluate(1.2 * gt, gt)
    closed_ok = (same.abs_rel == 0.0 and same.rmse == 0.0
                 and same.delta1 == 1.0
                 and doubled.abs_rel == 1.0 and halved.abs_rel == 0.5
                 and (doubled.delta1, doubled.delta2, doubled.delta3)
                 == (halved.delta1, halved.delta2, halved.delta3)
                 == (0.0, 0.0, 0.0)
                 and (near.delta1, near.delta2, near.delta3) == (1.0, 1.0, 1.0))

    ok = oracle_ok and closed_ok
    record(10, ok, f"100 maps worst gap {worst:.1e}; closed forms "
                   f"{'exact' if closed_ok else 'WRONG'}")
    assert oracle_ok, f"metrics drifted {worst:.3e} from the scalar oracle"
    assert closed_ok


# ------------------------------------------------------------- criterion 11

def test_fusion_support_counts_and_min_views_monotonicity():
    # fronto-parallel constant-depth plane seen by two x-shifted cameras:
    # the correspondence offset is exactly integer, so mutual visibility is
    # countable in closed form
    h, w, fx, depth, shift = 8, 16, 20.0, 2.0, 0.5
    disparity = fx * shift / depth
    assert disparity == 5.0
    intr = geometry.CameraIntrinsics.from_params(fx, fx, (w - 1) / 2.0,
                                                 (h - 1) / 2.0)
    depths = [np.full((h, w), depth), np.full((h, w), depth)]
    poses = [geometry.RelativePose.identity(),
             geometry.RelativePose.from_rt(np.eye(3),
                                           np.array([-shift, 0.0, 0.0]))]
    cloud = fusion.fuse_depth_maps(depths, intr, poses, min_views=2)
    mutually_visible = 2 * h * (w - int(disparity))
    pair_ok = (len(cloud.points) == mutually_visible
               and bool(np.all(cloud.support == 2)))

    plane_counts = [len(fusion.fuse_depth_maps(depths, intr, poses,
                                               min_views=v).points)
                    for v in (1, 2, 3)]
    sc = family_scene(1)
    scene_counts = [len(fusion.fuse_depth_maps(sc.depths, sc.intrinsics,
                                               sc.poses, min_views=v).points)
                    for v in (1, 2, 3)]
    monotone = (plane_counts == sorted(plane_counts, reverse=True)
                and plane_counts[0] == 2 * h * w and plane_counts[2] == 0
                and scene_counts == sorted(scene_counts, reverse=True))

    ok = pair_ok and monotone
    record(11, ok, f"plane counts {plane_counts}, scene counts {scene_counts}")
    assert pair_ok, (f"expected {mutually_visible} support-2 points, got "
                     f"{len(cloud.points)}")
    assert monotone, f"counts not monotone: {plane_counts} / {scene_counts}"
