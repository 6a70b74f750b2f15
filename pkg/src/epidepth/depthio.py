"""Binary map formats and depth previews.

Depth maps and images share one layout: an 8-byte magic tag, two little-endian
uint32 dimensions (height, width), then the row-major float64 payload.  A depth
file may carry a second payload block of identical size holding per-pixel
confidence; readers detect it from the file size alone.
"""

import struct

import numpy as np

DEPTH_MAGIC = b"EPIDMAP1"
IMAGE_MAGIC = b"EPIIMG01"
_HEADER = struct.Struct("<II")


def _check_plane(arr, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be 2-d, got shape {arr.shape}")
    return arr


def _write(path, magic, planes):
    h, w = planes[0].shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_HEADER.pack(h, w))
        for plane in planes:
            fh.write(np.ascontiguousarray(plane, dtype="<f8").tobytes())


def _read(path, magic, max_planes):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != magic:
        raise ValueError(f"{path}: bad magic {buf[:8]!r}, expected {magic!r}")
    h, w = _HEADER.unpack_from(buf, 8)
    plane_bytes = h * w * 8
    body = len(buf) - 16
    if plane_bytes == 0 or body % plane_bytes or not 1 <= body // plane_bytes <= max_planes:
        raise ValueError(f"{path}: payload of {body} bytes does not fit {h}x{w} planes")
    planes = [np.frombuffer(buf, "<f8", count=h * w, offset=16 + i * plane_bytes)
              .reshape(h, w).copy() for i in range(body // plane_bytes)]
    return planes


def save_depth(path, depth, confidence=None):
    depth = _check_plane(depth, "depth")
    planes = [depth]
    if confidence is not None:
        confidence = _check_plane(confidence, "confidence")
        if confidence.shape != depth.shape:
            raise ValueError("confidence shape must match depth shape")
        planes.append(confidence)
    _write(path, DEPTH_MAGIC, planes)


def load_depth(path):
    """Returns (depth, confidence) with confidence None when absent."""
    planes = _read(path, DEPTH_MAGIC, 2)
    return planes[0], (planes[1] if len(planes) == 2 else None)


def save_image(path, image):
    _write(path, IMAGE_MAGIC, [_check_plane(image, "image")])


def load_image(path):
    return _read(path, IMAGE_MAGIC, 1)[0]


def write_depth_preview(path, depth):
    """16-bit grayscale PNG, min-max normalized over the finite values."""
    from PIL import Image

    depth = _check_plane(depth, "depth")
    finite = np.isfinite(depth)
    out = np.zeros(depth.shape, dtype=np.uint16)
    if finite.any():
        lo, hi = depth[finite].min(), depth[finite].max()
        if hi > lo:
            scaled = np.zeros_like(depth)
            scaled[finite] = (depth[finite] - lo) / (hi - lo) * 65535.0
            out = np.rint(scaled).astype(np.uint16)
    Image.fromarray(out).save(path, format="PNG")
