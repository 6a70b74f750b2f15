"""Multi-view depth fusion into a consistency-filtered point cloud.

Every pixel of every view proposes a world point.  A second view supports the
proposal when a round trip through its own stored depth lands back near the
original pixel at nearly the original depth: project the point into the other
view, read that view's depth at the nearest pixel, lift it back to a world
point, and reproject into the proposing view.  Points supported by fewer than
``min_views`` maps (counting the proposer) are dropped; survivors average the
world points of all agreeing views.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry


@dataclass
class FusedPointCloud:
    points: np.ndarray     # [m, 3] world coordinates
    support: np.ndarray    # [m] number of agreeing views, proposer included


def filter_by_confidence(confidence, max_sigma):
    """Mask of pixels whose predicted error bound is within ``max_sigma``."""
    confidence = np.asarray(confidence, dtype=np.float64)
    return np.isfinite(confidence) & (confidence <= max_sigma)


def _lattice(h, w):
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def fuse_depth_maps(depths, intrinsics, poses, min_views=2,
                    consistency_px=1.0, rel_depth_tol=0.01, masks=None):
    """Fuse per-view depth maps; ``poses`` map the shared world frame into
    each view (the proposing view's own pose included)."""
    if len(depths) != len(poses):
        raise ValueError("need one pose per depth map")
    if min_views < 1:
        raise ValueError("min_views must be at least 1")
    n = len(depths)
    h, w = depths[0].shape
    lattice = _lattice(h, w)
    if masks is None:
        masks = [np.ones((h, w), dtype=bool)] * n
    masks = [np.asarray(m, dtype=bool) for m in masks]

    world = []
    for v in range(n):
        if depths[v].shape != (h, w) or masks[v].shape != (h, w):
            raise ValueError("all depth maps and masks must share one shape")
        cam_pts = geometry.unproject(intrinsics, lattice, depths[v].ravel())
        world.append(poses[v].inverse().apply(cam_pts))

    points, supports = [], []
    for v in range(n):
        anchor_ok = masks[v].ravel() & (depths[v].ravel() > 0.0)
        accum = world[v].copy()
        support = np.ones(h * w, dtype=np.int64)
        for u in range(n):
            if u == v:
                continue
            pix, depth_u = geometry.project_to_reference(intrinsics, poses[u],
                                                         world[v])
            finite = np.isfinite(pix).all(axis=1) & (depth_u > 0.0)
            nearest = np.full((h * w, 2), -1, dtype=np.int64)
            nearest[finite] = np.rint(pix[finite]).astype(np.int64)
            inb = (finite & (nearest[:, 0] >= 0) & (nearest[:, 0] < w)
                   & (nearest[:, 1] >= 0) & (nearest[:, 1] < h))
            idx = np.nonzero(inb)[0]
            if idx.size == 0:
                continue
            ny, nx = nearest[idx, 1], nearest[idx, 0]
            readable = masks[u][ny, nx] & (depths[u][ny, nx] > 0.0)
            idx = idx[readable]
            if idx.size == 0:
                continue
            ny, nx = nearest[idx, 1], nearest[idx, 0]
            lifted = geometry.unproject(
                intrinsics, np.stack([nx, ny], axis=1).astype(np.float64),
                depths[u][ny, nx])
            lifted_world = poses[u].inverse().apply(lifted)
            back_pix, back_depth = geometry.project_to_reference(
                intrinsics, poses[v], lifted_world)
            own_depth = depths[v].ravel()[idx]
            err_px = np.linalg.norm(back_pix - lattice[idx], axis=1)
            agree = (np.isfinite(err_px) & (err_px < consistency_px)
                     & (np.abs(back_depth - own_depth) / own_depth < rel_depth_tol))
            hit = idx[agree]
            support[hit] += 1
            accum[hit] += lifted_world[agree]
        keep = anchor_ok & (support >= min_views)
        points.append(accum[keep] / support[keep, None])
        supports.append(support[keep])
    return FusedPointCloud(np.concatenate(points, axis=0),
                           np.concatenate(supports))


def write_ply(path, cloud):
    """ASCII PLY with double-precision coordinates and the support count."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud.points)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("property int support\nend_header\n")
        for (x, y, z), s in zip(cloud.points, cloud.support):
            fh.write(f"{x:.17g} {y:.17g} {z:.17g} {int(s)}\n")
