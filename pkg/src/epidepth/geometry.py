"""Camera geometry: intrinsics, rigid poses, depth hypotheses, epipolar grids.

Pixel coordinates are (x, y) with x along the image width.  A pose maps
points from the source camera frame into a reference camera frame
(p_ref = R p + t).  Depth is the z coordinate in the camera frame, so a pixel
(x, y) at depth d unprojects to d * K^-1 (x, y, 1)^T.
"""

from dataclasses import dataclass

import numpy as np

_EPS_W = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with a cached, validated inverse."""

    matrix: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_matrix(cls, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {matrix.shape}")
        if matrix[0, 0] <= 0 or matrix[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.det(matrix)) < 1e-12:
            raise ValueError("intrinsics matrix is not invertible")
        inverse = np.linalg.inv(matrix)
        round_trip = matrix @ inverse
        if not np.allclose(round_trip, np.eye(3), rtol=0, atol=1e-9):
            raise ValueError("intrinsics inverse round-trip exceeds 1e-9")
        matrix.setflags(write=False)
        inverse.setflags(write=False)
        return cls(matrix, inverse)

    @classmethod
    def from_params(cls, fx, fy, cx, cy, skew=0.0):
        return cls.from_matrix([[fx, skew, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor):
        """Intrinsics for a grid whose pixels are ``factor`` of these pixels.

        Full-res pixel (x, y) corresponds to coordinate (x/factor, y/factor)
        in the scaled frame, matching a stride-``factor`` downsample that
        keeps sample (0, 0).
        """
        s = np.diag([1.0 / factor, 1.0 / factor, 1.0])
        return CameraIntrinsics.from_matrix(s @ self.matrix)


@dataclass(frozen=True)
class RelativePose:
    """Rigid transform p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def from_rt(cls, rotation, translation):
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64).reshape(3)
        if rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(rotation @ rotation.T, np.eye(3), rtol=0, atol=1e-9):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if np.linalg.det(rotation) < 0:
            raise ValueError("rotation determinant must be +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        return cls(rotation, translation)

    @classmethod
    def identity(cls):
        return cls.from_rt(np.eye(3), np.zeros(3))

    def compose(self, other):
        """Return the transform applying ``other`` first, then ``self``."""
        return RelativePose.from_rt(self.rotation @ other.rotation,
                                    self.rotation @ other.translation + self.translation)

    def inverse(self):
        return RelativePose.from_rt(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class DepthHypothesisSet:
    """Strictly increasing candidate depths, uniform in inverse depth."""

    values: np.ndarray
    depth_min: float
    depth_max: float


def sample_depth_hypotheses(count, depth_min, depth_max, endpoint_inclusive=True):
    """Sample ``count`` depths uniformly spaced in inverse depth.

    values[i] = 1 / ((1 - u_i)/depth_min + u_i/depth_max) with u_i = i/(count-1)
    when ``endpoint_inclusive`` (both range ends are hypotheses), else
    u_i = i/count.
    """
    if count < 2:
        raise ValueError("need at least 2 hypotheses")
    if not (0 < depth_min < depth_max):
        raise ValueError("require 0 < depth_min < depth_max")
    denom = count - 1 if endpoint_inclusive else count
    u = np.arange(count, dtype=np.float64) / denom
    values = 1.0 / ((1.0 - u) / depth_min + u / depth_max)
    return DepthHypothesisSet(values, float(depth_min), float(depth_max))


def unproject(intrinsics, pixels, depths):
    """Back-project pixels[..., 2] at depths[...] to camera-frame points."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    ones = np.ones(pixels.shape[:-1] + (1,))
    homo = np.concatenate([pixels, ones], axis=-1)
    rays = homo @ intrinsics.inverse.T
    return rays * depths[..., None]


def project_to_reference(intrinsics, pose, points):
    """Project source-frame points into a reference view.

    Returns (pixels[..., 2], depth_in_ref[...]).  Points whose projective
    scale is within 1e-12 of zero yield non-finite pixels; callers mark those
    samples invalid.
    """
    points = np.asarray(points, dtype=np.float64)
    cam = points @ pose.rotation.T + pose.translation
    homo = cam @ intrinsics.matrix.T
    w = homo[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = np.where(np.abs(w)[..., None] < _EPS_W, np.nan, homo[..., :2] / w[..., None])
    return pix, cam[..., 2]


@dataclass(frozen=True)
class EpipolarSampleGrid:
    """Projected sampling locations for every (pixel, view, hypothesis).

    Coordinates live in the frame of the feature map being sampled
    (full resolution divided by ``stride``); ``valid`` applies the in-bounds
    and positive-depth test in that same frame.  Non-finite projections are
    replaced by zeros and marked invalid so samplers always see finite input.
    """

    lattice: np.ndarray       # (P, 2) source pixel coords, feature frame
    pixels: np.ndarray        # (P, n_views, K, 2) sample coords, feature frame
    depths: np.ndarray        # (P, n_views, K) depth in each reference frame
    valid: np.ndarray         # (P, n_views, K) bool
    stride: int
    image_size: tuple         # (h, w) full resolution
    feature_size: tuple       # (h/stride, w/stride)


def sample_validity(pixels, depths, size):
    """Mask-code test: 0 <= x < w, 0 <= y < h, depth >= 0, all on real coords.

    ``size`` is (h, w) of the frame the coordinates live in.  Non-finite
    coordinates fail the bounds test.
    """
    h, w = size
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    finite = np.isfinite(pixels).all(axis=-1) & np.isfinite(depths)
    x, y = pixels[..., 0], pixels[..., 1]
    with np.errstate(invalid="ignore"):
        ok = finite & (x >= 0.0) & (x < w) & (y >= 0.0) & (y < h) & (depths >= 0.0)
    return ok


def build_epipolar_grid(intrinsics, poses, hypotheses, image_size, stride=4):
    """Project every lattice pixel at every hypothesis depth into every view.

    ``poses`` maps the source camera frame into each reference frame.  The
    lattice covers the full image at ``stride`` spacing; a sample is valid
    iff 0 <= x < w_f, 0 <= y < h_f and its depth in the reference frame is
    >= 0, evaluated on the unrounded coordinates.
    """
    h, w = image_size
    if h % stride or w % stride:
        raise ValueError(f"image size {image_size} not divisible by stride {stride}")
    hf, wf = h // stride, w // stride
    k_feat = intrinsics.scaled(stride) if stride != 1 else intrinsics
    xs, ys = np.meshgrid(np.arange(wf, dtype=np.float64), np.arange(hf, dtype=np.float64))
    lattice = np.stack([xs.ravel(), ys.ravel()], axis=-1)          # (P, 2)
    rays = np.concatenate([lattice, np.ones((lattice.shape[0], 1))], axis=-1) @ k_feat.inverse.T
    points = rays[:, None, :] * hypotheses.values[None, :, None]    # (P, K, 3)

    n = len(poses)
    p_total, k_total = lattice.shape[0], hypotheses.values.shape[0]
    pixels = np.empty((p_total, n, k_total, 2))
    depths = np.empty((p_total, n, k_total))
    valid = np.empty((p_total, n, k_total), dtype=bool)
    for i, pose in enumerate(poses):
        pix, z = project_to_reference(k_feat, pose, points)
        finite = np.isfinite(pix).all(axis=-1)
        pixels[:, i] = np.where(finite[..., None], pix, 0.0)
        depths[:, i] = z
        valid[:, i] = sample_validity(pix, z, (hf, wf))
    return EpipolarSampleGrid(lattice, pixels, depths, valid, int(stride), (h, w), (hf, wf))


# ----------------------------------------------------------- text formats ---

INTRINSICS_TAG = "epidepth-intrinsics-v1"
POSES_TAG = "epidepth-poses-v1"


def _fmt(values):
    return " ".join(format(v, ".17g") for v in np.asarray(values, dtype=np.float64).ravel())


def save_intrinsics(path, intrinsics):
    """Write the 3x3 matrix as 9 row-major reals after a format tag line."""
    with open(path, "w") as fh:
        fh.write(INTRINSICS_TAG + "\n")
        fh.write(_fmt(intrinsics.matrix) + "\n")


def load_intrinsics(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != INTRINSICS_TAG:
        raise ValueError(f"unrecognized intrinsics file: {path}")
    vals = np.array([float(v) for v in " ".join(lines[1:]).split()])
    if vals.size != 9:
        raise ValueError(f"expected 9 reals in {path}, got {vals.size}")
    return CameraIntrinsics.from_matrix(vals.reshape(3, 3))


def save_poses(path, poses):
    """Write one pose per line: 9 rotation reals (row-major) then 3 translation."""
    with open(path, "w") as fh:
        fh.write(POSES_TAG + "\n")
        for pose in poses:
            fh.write(_fmt(pose.rotation) + " " + _fmt(pose.translation) + "\n")


def load_poses(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != POSES_TAG:
        raise ValueError(f"unrecognized poses file: {path}")
    poses = []
    for ln in lines[1:]:
        vals = np.array([float(v) for v in ln.split()])
        if vals.size != 12:
            raise ValueError(f"expected 12 reals per pose line in {path}")
        poses.append(RelativePose.from_rt(vals[:9].reshape(3, 3), vals[9:]))
    return poses
