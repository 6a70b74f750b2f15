"""Pose from 3D-2D correspondences: normalized DLT plus Gauss-Newton.

The initializer solves the 12-parameter projective form on intrinsics-
normalized rays with Hartley-style point conditioning, projects the leading
3x3 block to the nearest rotation, and fixes the sign so most points land in
front of the camera.  Refinement then minimizes pixel-space reprojection with
a left multiplicative rotation perturbation, which keeps the iterate on the
manifold up to first order; a final SVD projection removes any residual
drift.
"""

import numpy as np

from .errors import SolverError
from .geometry import RelativePose

_DEGENERACY_RATIO = 1e-9


def rodrigues(omega):
    """Rotation matrix for the axis-angle vector ``omega``."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(omega)
    hat = np.array([[0.0, -omega[2], omega[1]],
                    [omega[2], 0.0, -omega[0]],
                    [-omega[1], omega[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + hat
    return (np.eye(3) + np.sin(theta) / theta * hat
            + (1.0 - np.cos(theta)) / theta**2 * (hat @ hat))


def nearest_rotation(matrix):
    """Orthogonal Procrustes projection with a determinant fix."""
    u, _, vt = np.linalg.svd(matrix)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def rotation_angle_between(a, b):
    """Geodesic angle between two rotation matrices, in radians."""
    cos = (np.trace(np.asarray(a) @ np.asarray(b).T) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def _dlt_initialize(points, rays):
    mean = points.mean(axis=0)
    spread = np.sqrt(((points - mean) ** 2).sum(axis=1).mean())
    if spread < 1e-12:
        raise SolverError("all 3D points coincide")
    scale = np.sqrt(3.0) / spread
    homo = np.concatenate([(points - mean) * scale,
                           np.ones((len(points), 1))], axis=1)

    a = np.zeros((2 * len(points), 12))
    a[0::2, 0:4] = homo
    a[0::2, 8:12] = -rays[:, 0:1] * homo
    a[1::2, 4:8] = homo
    a[1::2, 8:12] = -rays[:, 1:2] * homo
    _, s, vt = np.linalg.svd(a)
    if s[-2] < _DEGENERACY_RATIO * s[0]:
        raise SolverError("degenerate correspondences: projection matrix "
                          "is not determined up to scale")
    p = vt[-1].reshape(3, 4)

    condition = np.eye(4)
    condition[:3, :3] *= scale
    condition[:3, 3] = -scale * mean
    p = p @ condition

    depths = points @ p[2, :3] + p[2, 3]
    if np.sum(depths > 0.0) < len(points) / 2.0:
        p = -p
    sv = np.linalg.svd(p[:, :3], compute_uv=False)
    if sv[0] < 1e-12:
        raise SolverError("projection matrix collapsed")
    return nearest_rotation(p[:, :3]), p[:, 3] / sv.mean()


def _refine(points, pixels, intrinsics, rotation, translation,
            max_iters, tol):
    k = intrinsics.matrix
    for _ in range(max_iters):
        rotated = points @ rotation.T
        cam = rotated + translation
        if np.any(np.abs(cam[:, 2]) < 1e-9):
            raise SolverError("refinement pushed a point onto the camera plane")
        homo = cam @ k.T
        proj = homo[:, :2] / homo[:, 2:3]
        residual = (proj - pixels).reshape(-1)

        inv_z = 1.0 / homo[:, 2]
        d_pix = np.zeros((len(points), 2, 3))
        d_pix[:, 0, :] = (k[0] - proj[:, 0:1] * k[2]) * inv_z[:, None]
        d_pix[:, 1, :] = (k[1] - proj[:, 1:2] * k[2]) * inv_z[:, None]

        jac = np.zeros((len(points), 2, 6))
        for i, q in enumerate(rotated):
            hat = np.array([[0.0, -q[2], q[1]],
                            [q[2], 0.0, -q[0]],
                            [-q[1], q[0], 0.0]])
            jac[i, :, :3] = d_pix[i] @ (-hat)
            jac[i, :, 3:] = d_pix[i]
        jac = jac.reshape(-1, 6)

        normal = jac.T @ jac
        try:
            delta = np.linalg.solve(normal, -jac.T @ residual)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"normal equations are singular: {exc}") from exc
        rotation = rodrigues(delta[:3]) @ rotation
        translation = translation + delta[3:]
        if np.linalg.norm(delta) < tol:
            break
    return nearest_rotation(rotation), translation


def solve_pnp(points, pixels, intrinsics, max_iters=50, tol=1e-10):
    """Estimate the pose mapping ``points`` onto observed ``pixels``.

    ``points`` live in the source camera frame; the returned pose maps them
    into the observing camera's frame.  Needs at least 6 correspondences.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] != pixels.shape[0]:
        raise ValueError("points and pixels must pair up")
    if points.shape[0] < 6:
        raise ValueError(f"need at least 6 correspondences, got {points.shape[0]}")
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(pixels))):
        raise ValueError("correspondences must be finite")

    ones = np.ones((pixels.shape[0], 1))
    rays = np.concatenate([pixels, ones], axis=1) @ intrinsics.inverse.T
    rotation, translation = _dlt_initialize(points, rays)
    rotation, translation = _refine(points, pixels, intrinsics, rotation,
                                    translation, max_iters, tol)
    return RelativePose.from_rt(rotation, translation)
