"""Controlled pose corruption for robustness studies.

For each reference view we sample ground-truth 3D points from the source
depth map, jitter their projected pixel observations with per-axis uniform
noise, and re-solve the pose.  The candidate replaces the ground truth only
if the mean reprojection offset over the full source lattice stays under an
acceptance threshold; otherwise the record keeps the original pose, so a
rejected perturbation is exactly a no-op.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import SolverError
from .pnp import rotation_angle_between, solve_pnp

PERTURBATIONS_TAG = "epidepth-perturbations-v1"
_SOLVE_ATTEMPTS = 5


@dataclass
class PerturbationRecord:
    source_view: int
    ref_view: int
    pose: geometry.RelativePose
    accepted: bool
    rotation_delta: float      # radians between used and true rotation
    translation_delta: float


def _lattice_points(depth, intrinsics):
    h, w = depth.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    lattice = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return geometry.unproject(intrinsics, lattice, depth.ravel())


def mean_reprojection_offset(points, intrinsics, pose_a, pose_b):
    """Mean pixel distance between the two poses' projections of ``points``."""
    pix_a, _ = geometry.project_to_reference(intrinsics, pose_a, points)
    pix_b, _ = geometry.project_to_reference(intrinsics, pose_b, points)
    offsets = np.linalg.norm(pix_a - pix_b, axis=-1)
    return float(np.mean(offsets))


def perturb_pose(source_depth, intrinsics, gt_pose, noise_px, rng,
                 point_count=10, accept_px=10.0):
    """Corrupt one pose; returns (pose, accepted, candidate_or_None)."""
    h, w = source_depth.shape
    lattice_points = _lattice_points(source_depth, intrinsics)
    candidate = None
    for _ in range(_SOLVE_ATTEMPTS):
        xs = rng.integers(0, w, point_count)
        ys = rng.integers(0, h, point_count)
        pixels = np.stack([xs, ys], axis=1).astype(np.float64)
        points = geometry.unproject(intrinsics, pixels,
                                    source_depth[ys, xs])
        observed, _ = geometry.project_to_reference(intrinsics, gt_pose, points)
        if not np.all(np.isfinite(observed)):
            continue
        observed = observed + rng.uniform(-noise_px, noise_px, observed.shape)
        try:
            candidate = solve_pnp(points, observed, intrinsics)
            break
        except SolverError:
            continue
    if candidate is None:
        return gt_pose, False, None
    offset = mean_reprojection_offset(lattice_points, intrinsics,
                                      candidate, gt_pose)
    if not np.isfinite(offset) or offset >= accept_px:
        return gt_pose, False, candidate
    return candidate, True, candidate


def perturb_scene(scene, noise_px, seed, source_view=0, point_count=10,
                  accept_px=10.0):
    """One PerturbationRecord per reference view of ``scene``."""
    rng = np.random.default_rng(seed)
    inv = scene.poses[source_view].inverse()
    records = []
    for ref in range(len(scene.poses)):
        if ref == source_view:
            continue
        gt_pose = scene.poses[ref].compose(inv)
        pose, accepted, _ = perturb_pose(scene.depths[source_view],
                                         scene.intrinsics, gt_pose, noise_px,
                                         rng, point_count, accept_px)
        records.append(PerturbationRecord(
            source_view, ref, pose, accepted,
            rotation_angle_between(pose.rotation, gt_pose.rotation),
            float(np.linalg.norm(pose.translation - gt_pose.translation))))
    return records


def save_perturbations(path, records):
    with open(path, "w") as fh:
        fh.write(PERTURBATIONS_TAG + "\n")
        for rec in records:
            vals = list(rec.pose.rotation.ravel()) + list(rec.pose.translation)
            fh.write(" ".join([str(rec.source_view), str(rec.ref_view)]
                              + [f"{v:.17g}" for v in vals]
                              + [str(int(rec.accepted)),
                                 f"{rec.rotation_delta:.17g}",
                                 f"{rec.translation_delta:.17g}"]) + "\n")


def load_perturbations(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != PERTURBATIONS_TAG:
        raise ValueError(f"unrecognized perturbations file: {path}")
    records = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 17:
            raise ValueError(f"expected 17 fields per record in {path}")
        vals = [float(v) for v in parts[2:14]]
        records.append(PerturbationRecord(
            int(parts[0]), int(parts[1]),
            geometry.RelativePose.from_rt(np.array(vals[:9]).reshape(3, 3),
                                          np.array(vals[9:])),
            bool(int(parts[14])), float(parts[15]), float(parts[16])))
    return records
