"""Synthetic desk scenes with analytic ground-truth depth.

A scene is a handful of textured spheres floating in front of a slanted
backdrop plane, imaged by a ring of cameras around the source view.  The world
frame is the source camera frame, so view 0 always carries the identity pose.
Surface intensity is a function of the world-space hit point alone (value
noise plus a fixed world-anchored light), which makes the rendered texture
consistent across views; depth is the ray parameter of the analytic
intersection, which equals z-depth because ray directions keep a unit third
component in the camera frame.
"""

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import depthio, geometry
from .errors import GenerationError

_LIGHT = np.array([-0.3, -0.4, -0.85]) / np.linalg.norm([-0.3, -0.4, -0.85])
_LATERAL = (1.0, -1.0, 0.55, -0.55, 0.3, -0.3, 0.8, -0.8)
_VERTICAL = (0.12, -0.12, 0.2, -0.08, 0.15, -0.15, 0.05, -0.2)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class Backdrop:
    point: np.ndarray
    normal: np.ndarray


@dataclass(frozen=True)
class SceneParams:
    image_size: tuple = (48, 64)
    view_count: int = 3
    focal: float = 60.0
    sphere_count: int = 4
    backdrop_distance: float = 6.0
    backdrop_tilt: float = 0.15
    depth_near: float = 1.5
    baseline: float = 0.8
    look_distance: float = 4.0
    min_overlap: float = 0.5
    max_retries: int = 4
    texture_octaves: int = 4
    texture_scale: float = 1.1
    shading: float = 1.0

    def __post_init__(self):
        if self.view_count < 1:
            raise ValueError("need at least the source view")
        if not 0.0 <= self.min_overlap <= 1.0:
            raise ValueError("min_overlap must lie in [0, 1]")
        if not 0.0 <= self.shading <= 1.0:
            raise ValueError("shading must lie in [0, 1]")


@dataclass
class SyntheticScene:
    params: SceneParams
    intrinsics: geometry.CameraIntrinsics
    poses: list           # source frame -> view i frame; poses[0] is identity
    images: list          # [h, w] intensities in [0, 1]
    depths: list          # [h, w] positive z-depths


# ----------------------------------------------------------------- texture ---

def _hash_lattice(ix, iy, iz, salt):
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ np.uint64(salt))
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 2.0**53)


def _lattice_noise(points, salt):
    base = np.floor(points)
    frac = points - base
    base = base.astype(np.int64)
    fade = frac * frac * (3.0 - 2.0 * frac)
    out = np.zeros(points.shape[0])
    for cx in (0, 1):
        wx = fade[:, 0] if cx else 1.0 - fade[:, 0]
        for cy in (0, 1):
            wy = fade[:, 1] if cy else 1.0 - fade[:, 1]
            for cz in (0, 1):
                wz = fade[:, 2] if cz else 1.0 - fade[:, 2]
                corner = _hash_lattice(base[:, 0] + cx, base[:, 1] + cy,
                                       base[:, 2] + cz, salt)
                out += wx * wy * wz * corner
    return out


def value_noise(points, salt, octaves=4, scale=1.0):
    """Multi-octave trilinear value noise over 3D points, values in [0, 1)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    total = np.zeros(points.shape[0])
    norm, amp = 0.0, 1.0
    for octave in range(octaves):
        octave_salt = (np.uint64(salt) + np.uint64(octave) * np.uint64(0x9E37)) & np.uint64(2**64 - 1)
        total += amp * _lattice_noise(points * (scale * 2.0**octave), octave_salt)
        norm += amp
        amp *= 0.5
    return total / norm


# ------------------------------------------------------------- ray tracing ---

def trace_rays(origin, dirs, spheres, backdrop):
    """Nearest positive hit per ray; returns (t, world normals).

    ``dirs`` need not be normalized: the returned parameter is measured in
    units of the direction vector, which the renderer exploits to read off
    z-depth directly.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    denom = dirs @ backdrop.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = ((backdrop.point - origin) @ backdrop.normal) / denom
    t = np.where((t_plane > 1e-9) & np.isfinite(t_plane), t_plane, np.inf)
    normals = np.where(denom[:, None] < 0.0, backdrop.normal, -backdrop.normal)

    a = np.einsum("nd,nd->n", dirs, dirs)
    for sphere in spheres:
        oc = origin - sphere.center
        b = dirs @ oc
        disc = b * b - a * ((oc @ oc) - sphere.radius**2)
        root = np.sqrt(np.maximum(disc, 0.0))
        t_s = (-b - root) / a
        hit = (disc > 0.0) & (t_s > 1e-9) & (t_s < t)
        if hit.any():
            pts = origin + t_s[hit, None] * dirs[hit]
            normals = normals.copy()
            normals[hit] = (pts - sphere.center) / sphere.radius
            t = np.where(hit, t_s, t)
    return t, normals


def shade(points, normals, salt, octaves, scale, shading=1.0):
    """Texture times Lambert term; ``shading`` fades the latter toward flat."""
    tex = value_noise(points, salt, octaves, scale)
    lambert = np.clip(normals.reshape(-1, 3) @ _LIGHT, 0.0, 1.0)
    lit = (1.0 - shading) + shading * lambert
    return (0.25 + 0.7 * tex) * (0.45 + 0.55 * lit)


def render_view(intrinsics, pose, image_size, spheres, backdrop, salt,
                octaves=4, scale=1.0, shading=1.0):
    """Render one posed view; returns (image, depth) in [h, w]."""
    h, w = image_size
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    lattice = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=1)
    dirs_cam = lattice @ intrinsics.inverse.T
    origin = pose.inverse().apply(np.zeros(3))
    dirs_world = dirs_cam @ pose.rotation
    t, normals = trace_rays(origin, dirs_world, spheres, backdrop)
    if not np.all(np.isfinite(t)):
        raise GenerationError("a camera ray escaped past the backdrop")
    points = origin + t[:, None] * dirs_world
    image = shade(points, normals, salt, octaves, scale, shading)
    return image.reshape(h, w), t.reshape(h, w)


def compute_view_overlap(source_depth, intrinsics, pose):
    """Fraction of source pixels whose 3D point lands inside the posed view."""
    h, w = source_depth.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    lattice = np.stack([xs.ravel(), ys.ravel()], axis=1)
    points = geometry.unproject(intrinsics, lattice, source_depth.ravel())
    pixels, depths = geometry.project_to_reference(intrinsics, pose, points)
    return float(geometry.sample_validity(pixels, depths, (h, w)).mean())


# -------------------------------------------------------------- generation ---

def _look_at(position, target):
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, forward)
    right = right / np.linalg.norm(right)
    rotation = np.stack([right, np.cross(forward, right), forward])
    return geometry.RelativePose.from_rt(rotation, -rotation @ position)


def _ring_poses(params, baseline):
    poses = [geometry.RelativePose.identity()]
    target = np.array([0.0, 0.0, params.look_distance])
    for i in range(params.view_count - 1):
        growth = 1.0 + 0.1 * (i // len(_LATERAL))
        position = baseline * growth * np.array(
            [_LATERAL[i % len(_LATERAL)], _VERTICAL[i % len(_VERTICAL)], 0.0])
        poses.append(_look_at(position, target))
    return poses


def _sample_objects(params, rng):
    h, w = params.image_size
    spheres = []
    for _ in range(params.sphere_count):
        radius = rng.uniform(0.35, 0.8)
        z = rng.uniform(params.depth_near + radius + 0.3,
                        params.backdrop_distance - radius - 0.3)
        x = rng.uniform(-0.35, 0.35) * z * w / params.focal
        y = rng.uniform(-0.35, 0.35) * z * h / params.focal
        spheres.append(Sphere(np.array([x, y, z]), radius))
    tilt_x = rng.uniform(-params.backdrop_tilt, params.backdrop_tilt)
    tilt_y = rng.uniform(-params.backdrop_tilt, params.backdrop_tilt)
    cx, sx = math.cos(tilt_x), math.sin(tilt_x)
    cy, sy = math.cos(tilt_y), math.sin(tilt_y)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    normal = rot_x @ rot_y @ np.array([0.0, 0.0, -1.0])
    backdrop = Backdrop(np.array([0.0, 0.0, params.backdrop_distance]), normal)
    return spheres, backdrop


def generate_scene(params, seed):
    """Deterministic scene build; shrinks the camera ring until every
    reference view overlaps the source by at least ``min_overlap``."""
    rng = np.random.default_rng(seed)
    salt = int(rng.integers(0, 2**63))
    spheres, backdrop = _sample_objects(params, rng)
    h, w = params.image_size
    intrinsics = geometry.CameraIntrinsics.from_params(
        params.focal, params.focal, (w - 1) / 2.0, (h - 1) / 2.0)

    baseline = params.baseline
    for _ in range(params.max_retries + 1):
        poses = _ring_poses(params, baseline)
        images, depths = [], []
        try:
            for pose in poses:
                image, depth = render_view(intrinsics, pose, params.image_size,
                                           spheres, backdrop, salt,
                                           params.texture_octaves,
                                           params.texture_scale, params.shading)
                images.append(image)
                depths.append(depth)
        except GenerationError:
            baseline *= 0.7   # ring so wide a ray misses the backdrop
            continue
        overlaps = [compute_view_overlap(depths[0], intrinsics, pose)
                    for pose in poses[1:]]
        if all(o >= params.min_overlap for o in overlaps):
            return SyntheticScene(replace(params, baseline=baseline),
                                  intrinsics, poses, images, depths)
        baseline *= 0.7
    raise GenerationError(
        f"view overlap stayed below {params.min_overlap} after "
        f"{params.max_retries} baseline reductions")


# --------------------------------------------------------------- directory ---

def save_scene(scene_dir, scene):
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    geometry.save_intrinsics(scene_dir / "intrinsics.txt", scene.intrinsics)
    geometry.save_poses(scene_dir / "poses.txt", scene.poses)
    for i, (image, depth) in enumerate(zip(scene.images, scene.depths)):
        depthio.save_image(scene_dir / f"view_{i:03d}.img", image)
        depthio.save_depth(scene_dir / f"depth_{i:03d}.bin", depth)


def load_scene(scene_dir):
    scene_dir = Path(scene_dir)
    intrinsics = geometry.load_intrinsics(scene_dir / "intrinsics.txt")
    poses = geometry.load_poses(scene_dir / "poses.txt")
    images, depths = [], []
    for i in range(len(poses)):
        images.append(depthio.load_image(scene_dir / f"view_{i:03d}.img"))
        depths.append(depthio.load_depth(scene_dir / f"depth_{i:03d}.bin")[0])
    h, w = images[0].shape
    params = SceneParams(image_size=(h, w), view_count=len(poses))
    return SyntheticScene(params, intrinsics, poses, images, depths)
