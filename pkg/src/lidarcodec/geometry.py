"""Sensor-intrinsic coordinate transforms and grid quantization.

Three preprocessing modes produce the continuous coordinate triple that is
quantized onto the octree grid:

* ``cylbeam``   -- (rho, theta, beam) using per-laser pitch/offset calibration
* ``spherical`` -- (r, theta, phi)
* ``cartesian`` -- (x, y, z) unchanged
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateGeometryError,
    FormatError,
    InvalidBeamError,
    InvalidPointError,
    OutOfVolumeError,
)

MODES = ("cylbeam", "spherical", "cartesian")
MODE_CODES = {name: i for i, name in enumerate(MODES)}


@dataclass(frozen=True)
class SensorIntrinsics:
    pitch_angles: np.ndarray
    vertical_offsets: np.ndarray
    phi_per_turn: np.ndarray | None = None
    sort_order: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        pitch = np.asarray(self.pitch_angles, dtype=np.float64).reshape(-1)
        offs = np.asarray(self.vertical_offsets, dtype=np.float64).reshape(-1)
        if pitch.size < 1:
            raise FormatError("intrinsics need at least one beam")
        if offs.size != pitch.size:
            raise FormatError(
                f"lasersZ has {offs.size} entries, lasersTheta has {pitch.size}")
        if not (np.all(np.isfinite(pitch)) and np.all(np.isfinite(offs))):
            raise FormatError("intrinsics contain non-finite values")
        object.__setattr__(self, "pitch_angles", pitch)
        object.__setattr__(self, "vertical_offsets", offs)
        if self.phi_per_turn is not None:
            phi = np.asarray(self.phi_per_turn, dtype=np.int64).reshape(-1)
            if phi.size != pitch.size:
                raise FormatError("lasersNumPhiPerTurn length differs from numLasers")
            object.__setattr__(self, "phi_per_turn", phi)
        if np.any(np.diff(pitch) <= 0):
            object.__setattr__(self, "sort_order", np.argsort(pitch, kind="stable"))

    @property
    def num_beams(self) -> int:
        return int(self.pitch_angles.size)

    def digest(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        h.update(self.pitch_angles.astype("<f8").tobytes())
        h.update(self.vertical_offsets.astype("<f8").tobytes())
        return int.from_bytes(h.digest(), "little")

    def to_json(self) -> dict:
        out = {
            "numLasers": self.num_beams,
            "lasersTheta": self.pitch_angles.tolist(),
            "lasersZ": self.vertical_offsets.tolist(),
        }
        if self.phi_per_turn is not None:
            out["lasersNumPhiPerTurn"] = self.phi_per_turn.tolist()
        return out


def intrinsics_from_dict(doc: dict, z_scale: float | None = None) -> SensorIntrinsics:
    """Build intrinsics from the ``numLasers``/``lasersTheta``/``lasersZ`` layout.

    ``lasersZScale`` (or the ``z_scale`` argument, which wins) multiplies the
    vertical offsets, for datasets whose offsets use a different unit than
    the points.  Unknown keys are ignored.
    """
    try:
        n = int(doc["numLasers"])
        theta = doc["lasersTheta"]
        offs = doc["lasersZ"]
    except KeyError as exc:
        raise FormatError(f"intrinsics missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad intrinsics: {exc}") from None
    if len(theta) != n:
        raise FormatError(f"numLasers={n} but lasersTheta has {len(theta)} entries")
    scale = z_scale if z_scale is not None else float(doc.get("lasersZScale", 1.0))
    return SensorIntrinsics(
        pitch_angles=np.asarray(theta, dtype=np.float64),
        vertical_offsets=np.asarray(offs, dtype=np.float64) * scale,
        phi_per_turn=doc.get("lasersNumPhiPerTurn"),
    )


def load_intrinsics(path, z_scale: float | None = None) -> SensorIntrinsics:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read intrinsics {path}: {exc}") from None
    return intrinsics_from_dict(doc, z_scale)


FORD_INTRINSICS = SensorIntrinsics(
    pitch_angles=[
        -0.461611, -0.451281, -0.440090, -0.430000, -0.418945, -0.408667, -0.398230, -0.388220,
        -0.377890, -0.367720, -0.357393, -0.347628, -0.337549, -0.327694, -0.317849, -0.308124,
        -0.298358, -0.289066, -0.279139, -0.269655, -0.260049, -0.250622, -0.241152, -0.231731,
        -0.222362, -0.213039, -0.203702, -0.194415, -0.185154, -0.175909, -0.166688, -0.157484,
        -0.149826, -0.143746, -0.137673, -0.131631, -0.125582, -0.119557, -0.113538, -0.107534,
        -0.101530, -0.095548, -0.089562, -0.083590, -0.077623, -0.071665, -0.065708, -0.059758,
        -0.053810, -0.047868, -0.041931, -0.035993, -0.030061, -0.024124, -0.018193, -0.012259,
        -0.006324, -0.000393, 0.005547, 0.011485, 0.017431, 0.023376, 0.029328, 0.035285,
    ],
    vertical_offsets=[
        29.9, 26.6, 28.3, 24.6, 26.8, 25.1, 24.8, 22.4,
        22.4, 21.9, 23.0, 20.7, 21.1, 20.3, 19.9, 19.0,
        18.9, 15.3, 17.3, 16.0, 16.2, 15.1, 14.8, 14.4,
        13.8, 13.0, 12.7, 12.1, 11.5, 11.0, 10.4, 9.8,
        10.7, 10.3, 10.0, 9.4, 9.1, 8.6, 8.2, 7.7,
        7.4, 6.8, 6.5, 6.0, 5.6, 5.1, 4.7, 4.3,
        3.9, 3.5, 3.0, 2.6, 2.1, 1.8, 1.3, 0.9,
        0.5, -0.1, -0.4, -0.9, -1.2, -1.7, -2.1, -2.5,
    ],
    phi_per_turn=[800] * 32 + [4000] * 32,
)

QNX_INTRINSICS = SensorIntrinsics(
    pitch_angles=[
        -0.268099, -0.230939, -0.194419, -0.158398, -0.122788, -0.087491, -0.052410, -0.017455,
        0.017456, 0.052408, 0.087487, 0.122781, 0.158381, 0.194378, 0.230865, 0.267953,
    ],
    vertical_offsets=[
        -2.0, -1.5, -1.3, -1.1, -1.0, -1.0, -1.0, -1.0,
        0.0, 0.0, -0.1, -0.2, -0.2, -0.2, -0.3, -0.2,
    ],
    phi_per_turn=[360] * 16,
)


def synthetic_intrinsics(num_beams: int = 32, fov=(-0.43, 0.18), offset=0.0) -> SensorIntrinsics:
    """Evenly spaced beams with a constant vertical offset."""
    return SensorIntrinsics(
        pitch_angles=np.linspace(fov[0], fov[1], num_beams),
        vertical_offsets=np.full(num_beams, float(offset)),
    )


# --- coordinate conversions -------------------------------------------------

def _as_points(p) -> tuple[np.ndarray, bool]:
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3:
        raise InvalidPointError(f"expected (..., 3) coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidPointError("non-finite coordinate")
    return arr, single


def wrap_angle(theta):
    """Wrap to the canonical interval (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(theta, dtype=np.float64), 2.0 * math.pi)


def to_cylindrical(p):
    """(x, y, z) -> (rho, theta, z).  The z-axis itself maps to theta = 0."""
    arr, single = _as_points(p)
    rho = np.hypot(arr[:, 0], arr[:, 1])
    theta = wrap_angle(np.arctan2(arr[:, 1], arr[:, 0]))
    out = np.stack([rho, theta, arr[:, 2]], axis=1)
    return out[0] if single else out


def to_spherical(p):
    """(x, y, z) -> (r, azimuth, elevation)."""
    arr, single = _as_points(p)
    r = np.sqrt(arr[:, 0] ** 2 + arr[:, 1] ** 2 + arr[:, 2] ** 2)
    if np.any(r == 0):
        raise DegenerateGeometryError("spherical angles undefined at the origin")
    theta = wrap_angle(np.arctan2(arr[:, 1], arr[:, 0]))
    phi = np.arcsin(np.clip(arr[:, 2] / r, -1.0, 1.0))
    out = np.stack([r, theta, phi], axis=1)
    return out[0] if single else out


def from_spherical(c):
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    r, theta, phi = c[:, 0], c[:, 1], c[:, 2]
    cp = np.cos(phi)
    return np.stack([r * cp * np.cos(theta), r * cp * np.sin(theta), r * np.sin(phi)], axis=1)


def map_beam(rho, z, intr: SensorIntrinsics):
    """Nearest calibrated beam (1-based) by squared pitch residual.

    Ties go to the smaller beam index.
    """
    rho_a = np.asarray(rho, dtype=np.float64)
    z_a = np.asarray(z, dtype=np.float64)
    scalar = rho_a.ndim == 0
    rho_a, z_a = np.atleast_1d(rho_a), np.atleast_1d(z_a)
    if np.any(rho_a <= 0):
        raise DegenerateGeometryError("beam pitch undefined for rho <= 0")
    pitch = np.arctan((z_a[:, None] - intr.vertical_offsets[None, :]) / rho_a[:, None])
    resid = (pitch - intr.pitch_angles[None, :]) ** 2
    beam = np.argmin(resid, axis=1).astype(np.int64) + 1
    return int(beam[0]) if scalar else beam


def inverse_beam(rho, beam, intr: SensorIntrinsics):
    """Height of the calibrated ray of ``beam`` at planar distance ``rho``."""
    b = np.asarray(beam)
    if np.any(b < 1) or np.any(b > intr.num_beams):
        raise InvalidBeamError(f"beam index outside [1, {intr.num_beams}]")
    idx = b.astype(np.int64) - 1
    return np.asarray(rho, dtype=np.float64) * np.tan(intr.pitch_angles[idx]) + intr.vertical_offsets[idx]


def forward_transform(points, mode: str, intr: SensorIntrinsics | None = None):
    """Cartesian points -> mode coordinates.

    Returns ``(coords, keep)``; ``keep`` is False for points the mode cannot
    represent (on the sensor axis for cylbeam, at the origin for spherical).
    """
    arr, _ = _as_points(points)
    keep = np.ones(len(arr), dtype=bool)
    if mode == "cartesian":
        return arr.copy(), keep
    if mode == "spherical":
        keep = np.any(arr != 0, axis=1)
        coords = np.zeros_like(arr)
        if keep.any():
            coords[keep] = to_spherical(arr[keep])
        return coords, keep
    if mode == "cylbeam":
        if intr is None:
            raise FormatError("cylbeam mode requires sensor intrinsics")
        cyl = to_cylindrical(arr)
        keep = cyl[:, 0] > 0
        coords = np.zeros_like(arr)
        if keep.any():
            coords[keep, 0] = cyl[keep, 0]
            coords[keep, 1] = cyl[keep, 1]
            coords[keep, 2] = map_beam(cyl[keep, 0], cyl[keep, 2], intr)
        return coords, keep
    raise FormatError(f"unknown preprocessing mode {mode!r}")


def inverse_transform(coords, mode: str, intr: SensorIntrinsics | None = None) -> np.ndarray:
    c = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    if mode == "cartesian":
        return c.copy()
    if mode == "spherical":
        return from_spherical(c)
    if mode == "cylbeam":
        if intr is None:
            raise FormatError("cylbeam mode requires sensor intrinsics")
        rho, theta = c[:, 0], c[:, 1]
        z = inverse_beam(rho, np.rint(c[:, 2]).astype(np.int64), intr)
        return np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)
    raise FormatError(f"unknown preprocessing mode {mode!r}")


# --- quantization -----------------------------------------------------------

@dataclass(frozen=True)
class QuantizationParams:
    depth: int
    scale: tuple[float, float, float]
    offset: tuple[float, float, float]

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("octree depth must be >= 1")
        scale = tuple(float(s) for s in self.scale)
        if len(scale) != 3 or not all(s > 0 and math.isfinite(s) for s in scale):
            raise ValueError(f"scales must be three positive reals, got {self.scale}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))

    @property
    def max_coord(self) -> int:
        return (1 << self.depth) - 1

    @property
    def bounds(self):
        hi = [o + s * self.max_coord for o, s in zip(self.offset, self.scale)]
        return tuple(self.offset), tuple(hi)


def _round_half_away(u: np.ndarray) -> np.ndarray:
    return np.sign(u) * np.floor(np.abs(u) + 0.5)


def in_volume(coords, q: QuantizationParams) -> np.ndarray:
    u = (np.atleast_2d(coords) - np.asarray(q.offset)) / np.asarray(q.scale)
    return np.all((u >= -0.5) & (u < q.max_coord + 0.5), axis=1)


def quantize(coords, q: QuantizationParams) -> np.ndarray:
    """Real triples -> integer grid triples in [0, 2^L - 1].

    Raises OutOfVolumeError (with the offending count) rather than dropping.
    """
    c = np.asarray(coords, dtype=np.float64)
    single = c.ndim == 1
    c = np.atleast_2d(c)
    inside = in_volume(c, q)
    if not inside.all():
        bad = int((~inside).sum())
        raise OutOfVolumeError(f"{bad} point(s) outside the quantization volume", bad)
    u = (c - np.asarray(q.offset)) / np.asarray(q.scale)
    g = np.clip(_round_half_away(u), 0, q.max_coord).astype(np.int64)
    return g[0] if single else g


def dequantize(grid, q: QuantizationParams) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    return np.asarray(q.offset) + g * np.asarray(q.scale)


def fit_quantization(coords: np.ndarray, depth: int, mode: str,
                     intr: SensorIntrinsics | None = None) -> QuantizationParams:
    """Per-frame bounding volume: each continuous axis spans [min, max].

    The beam axis of cylbeam is already integral and maps beam b to b - 1.
    """
    c = np.atleast_2d(coords)
    n_cells = (1 << depth) - 1
    lo = c.min(axis=0)
    hi = c.max(axis=0)
    scale, offset = [], []
    for axis in range(3):
        if mode == "cylbeam" and axis == 2:
            if intr is not None and intr.num_beams > n_cells + 1:
                raise ValueError(
                    f"depth {depth} cannot hold {intr.num_beams} beams on one axis")
            scale.append(1.0)
            offset.append(1.0)
            continue
        span = float(hi[axis] - lo[axis])
        scale.append(span / n_cells if span > 0 else 1.0)
        offset.append(float(lo[axis]))
    return QuantizationParams(depth=depth, scale=tuple(scale), offset=tuple(offset))
