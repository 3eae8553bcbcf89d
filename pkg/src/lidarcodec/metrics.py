"""Geometry distortion and rate-distortion comparison."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

PSNR_SENTINEL = 999.0
PEAK_KITTI = 59.70
PEAK_MM = 30000.0


class UndefinedOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    d1_psnr: float


def _nn_sq(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared distance from every ``src`` point to its nearest ``dst`` point."""
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return np.sum(diff * diff, axis=1)


def d1_mse(a, b) -> float:
    """Symmetric point-to-point MSE (max of the two directions)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("D1 needs two non-empty clouds")
    return max(float(np.mean(_nn_sq(a, b))), float(np.mean(_nn_sq(b, a))))


def d1_psnr(original, reconstructed, peak: float = PEAK_KITTI) -> float:
    """``10 log10(3 peak^2 / mse)``; identical clouds give ``inf``."""
    mse = d1_mse(original, reconstructed)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def report_psnr(value: float) -> float:
    return PSNR_SENTINEL if math.isinf(value) else value


def bd_br(curve_a, curve_b) -> float:
    """Average bitrate change of ``curve_b`` relative to ``curve_a`` in percent.

    Each curve is a sequence of :class:`RDPoint` (or ``(bpp, psnr)`` pairs).
    Log-rate is fit as a cubic in PSNR and integrated over the shared PSNR
    interval.  Negative means ``curve_b`` needs fewer bits.
    """
    ra, da = _curve(curve_a)
    rb, db = _curve(curve_b)
    lo = max(da.min(), db.min())
    hi = min(da.max(), db.max())
    if not hi > lo:
        raise UndefinedOverlapError("the two curves share no PSNR interval")
    pa = np.polyint(np.polyfit(da, np.log(ra), 3))
    pb = np.polyint(np.polyfit(db, np.log(rb), 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    ib = np.polyval(pb, hi) - np.polyval(pb, lo)
    if ia == ib:
        return 0.0
    return (math.exp((ib - ia) / (hi - lo)) - 1.0) * 100.0


def _curve(points):
    arr = np.array([(p.bpp, p.d1_psnr) if isinstance(p, RDPoint) else tuple(p)
                    for p in points], dtype=np.float64)
    if len(arr) < 4:
        raise ValueError("BD-BR needs at least four points per curve")
    if np.any(arr[:, 0] <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("rates must be positive and PSNR finite")
    return arr[:, 0], arr[:, 1]
