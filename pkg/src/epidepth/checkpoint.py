"""Parameter checkpoints: one flat little-endian float64 binary + text manifest.

The manifest is ``<path>.manifest``: a format tag line, then one line per
buffer with the name, byte offset into the binary, and the shape.  Buffer
order in the binary follows manifest order.
"""

import numpy as np

MANIFEST_TAG = "epidepth-checkpoint-v1 float64 little-endian"


def save_checkpoint(path, buffers):
    """Write named arrays (dict preserving order) to ``path`` and ``path``.manifest."""
    path = str(path)
    lines = [MANIFEST_TAG]
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in buffers.items():
            data = getattr(arr, "data", arr)
            data = np.asarray(data, dtype="<f8")
            if not data.flags.c_contiguous:  # ascontiguousarray would 1-d-ify scalars
                data = np.ascontiguousarray(data)
            if any(ch.isspace() for ch in name):
                raise ValueError(f"buffer name contains whitespace: {name!r}")
            fh.write(data.tobytes())
            dims = " ".join(str(d) for d in data.shape)
            lines.append(f"{name} {offset} {data.ndim} {dims}".rstrip())
            offset += data.nbytes
    with open(path + ".manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Read a checkpoint back into an ordered dict of float64 arrays."""
    path = str(path)
    with open(path + ".manifest") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != MANIFEST_TAG:
        raise ValueError(f"unrecognized checkpoint manifest at {path}.manifest")
    raw = np.fromfile(path, dtype="<f8")
    out = {}
    for line in lines[1:]:
        fields = line.split()
        name, offset, ndim = fields[0], int(fields[1]), int(fields[2])
        shape = tuple(int(d) for d in fields[3:3 + ndim])
        count = int(np.prod(shape)) if shape else 1
        start = offset // 8
        out[name] = raw[start:start + count].reshape(shape).astype(np.float64)
    return out
