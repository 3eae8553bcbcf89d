"""Point cloud files and synthetic LiDAR sweeps.

Readers return ``(n, 3)`` float64 Cartesian arrays.  Supported inputs are
KITTI-style ``.bin`` (four little-endian float32 per point, intensity
dropped) and PLY (ascii or binary little-endian) with x/y/z vertex
properties.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import SensorIntrinsics, synthetic_intrinsics

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_scan(path, fmt: str | None = None) -> np.ndarray:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if fmt in ("bin", "kitti"):
        return read_kitti_bin(raw)
    if fmt == "ply":
        return read_ply(raw)
    if fmt == "npy":
        arr = np.load(path)
        if arr.ndim != 2 or arr.shape[1] < 3:
            raise FormatError("npy scan must be an (n, >=3) array")
        return arr[:, :3].astype(np.float64)
    raise FormatError(f"unsupported scan format {fmt!r}")


def read_kitti_bin(raw: bytes) -> np.ndarray:
    if len(raw) % 16:
        raise FormatError(f"KITTI binary size {len(raw)} is not a multiple of 16 bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, :3].astype(np.float64)


def write_kitti_bin(path, points, intensity=None):
    p = np.asarray(points, dtype=np.float64)
    out = np.zeros((len(p), 4), dtype="<f4")
    out[:, :3] = p
    if intensity is not None:
        out[:, 3] = intensity
    Path(path).write_bytes(out.tobytes())


def _parse_ply_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file")
    nl = raw.find(b"\n", end)
    body = nl + 1 if nl >= 0 else len(raw)
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError("PLY property outside an element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"unsupported PLY property type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body


def read_ply(raw: bytes) -> np.ndarray:
    fmt, elements, body = _parse_ply_header(raw)
    if not elements or elements[0][0] != "vertex":
        raise FormatError("PLY layout unsupported: vertex must be the first element")
    _, count, props = elements[0]
    names = [n for n, _ in props]
    if any(t is None for _, t in props) or not {"x", "y", "z"} <= set(names):
        raise FormatError("PLY vertex needs scalar x, y, z properties")
    cols = [names.index(a) for a in "xyz"]
    if fmt == "ascii":
        rows = raw[body:].decode("ascii", errors="replace").splitlines()
        rows = [r for r in rows if r.strip()][:count]
        if len(rows) < count:
            raise FormatError(f"PLY announces {count} vertices, found {len(rows)}")
        try:
            table = np.array([r.split()[:len(names)] for r in rows], dtype=np.float64)
        except ValueError:
            raise FormatError("malformed ascii PLY vertex row") from None
        if table.shape != (count, len(names)):
            raise FormatError("malformed ascii PLY vertex table")
        return table[:, cols].reshape(count, 3)
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    if len(raw) - body < dtype.itemsize * count:
        raise FormatError("binary PLY truncated")
    table = np.frombuffer(raw, dtype=dtype, count=count, offset=body)
    return np.stack([table[a].astype(np.float64) for a in "xyz"], axis=1)


def write_ply(path, points, binary: bool = True):
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(p)}", "property double x", "property double y",
            "property double z", "end_header"]
    data = "\n".join(head).encode() + b"\n"
    if binary:
        data += p.astype("<f8").tobytes()
    else:
        data += "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in p.tolist()).encode()
    Path(path).write_bytes(data)


# --- synthetic sweeps -------------------------------------------------------------

def _ray_boxes(origin_z, dirs, boxes):
    """Nearest positive hit distance of rays from (0, 0, z0) against AABBs."""
    o = np.zeros((len(dirs), 3))
    o[:, 2] = origin_z
    best = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for lo, hi in boxes:
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= np.maximum(tmin, 0)) & (tmin > 0)
            best = np.where(hit & (tmin < best), tmin, best)
    return best


def random_scene(rng: np.random.Generator, n_objects: int = 12):
    """Axis-aligned boxes: two building rows plus cars and poles."""
    boxes = []
    for side in (-1, 1):
        dist = rng.uniform(7, 15)
        x = -60.0
        while x < 60:
            length = rng.uniform(8, 25)
            depth = rng.uniform(5, 10)
            height = rng.uniform(4, 15)
            y0 = side * dist
            y1 = side * (dist + depth)
            boxes.append((np.array([x, min(y0, y1), -1.8]),
                          np.array([x + length, max(y0, y1), height])))
            x += length + rng.uniform(0, 6)
    for _ in range(n_objects):
        cx, cy = rng.uniform(-40, 40), rng.uniform(-6, 6)
        if abs(cx) < 3 and abs(cy) < 2:
            continue
        if rng.random() < 0.7:
            half = np.array([rng.uniform(1.8, 2.4), rng.uniform(0.8, 1.0), 0])
            top = rng.uniform(-0.4, 0.2)
        else:
            half = np.array([0.15, 0.15, 0])
            top = rng.uniform(2, 5)
        boxes.append((np.array([cx, cy, -1.8]) - half, np.array([cx, cy, top]) + half))
    return boxes


def synthetic_scan(seed: int = 0, intrinsics: SensorIntrinsics | None = None,
                   azimuth_steps: int = 1024, max_range: float = 80.0,
                   ground: float = -1.73, noise: float = 0.01) -> np.ndarray:
    """One spinning-LiDAR sweep through a random street scene.

    Every return lies on its beam's cone ``z = rho * tan(pitch) + offset``
    (up to range noise), so cylbeam preprocessing recovers the beam index.
    """
    rng = np.random.default_rng(seed)
    intr = intrinsics or synthetic_intrinsics()
    boxes = random_scene(rng)
    theta = np.linspace(-np.pi, np.pi, azimuth_steps, endpoint=False)
    theta = theta + rng.uniform(0, 2 * np.pi / azimuth_steps)
    out = []
    for b in range(intr.num_beams):
        phi = intr.pitch_angles[b]
        z0 = intr.vertical_offsets[b]
        dirs = np.stack([np.cos(theta) * np.cos(phi), np.sin(theta) * np.cos(phi),
                         np.full_like(theta, np.sin(phi))], axis=1)
        t = _ray_boxes(z0, dirs, boxes)
        if np.sin(phi) < 0:
            t = np.minimum(t, (ground - z0) / np.sin(phi))
        t = t + rng.normal(0, noise, size=t.shape)
        ok = np.isfinite(t) & (t * np.cos(phi) < max_range) & (t * np.cos(phi) > 1.0)
        rho = t[ok] * np.cos(phi)
        out.append(np.stack([rho * np.cos(theta[ok]), rho * np.sin(theta[ok]),
                             rho * np.tan(phi) + z0], axis=1))
    return np.concatenate(out)
