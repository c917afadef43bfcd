"""Linear Time Surface: rendering, bilateral smoothing, sampling and
gradient-based event selection.

Grids are indexed ``[row, col]``; a pixel at sensor coordinates ``(x, y)``
lives at ``[y - y0, x - x0]``. Pixel centres sit on integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .events import US_PER_S, CameraIntrinsics, EventSlice, pixel_to_normalized
from .imageio import write_pgm


class EmptySlice(ValueError):
    pass


class OutOfWindow(ValueError):
    pass


class PixelRect(NamedTuple):
    x0: int
    y0: int
    w: int
    h: int

    @classmethod
    def covering(cls, x_min, y_min, x_max, y_max, sensor_w=None, sensor_h=None) -> "PixelRect":
        x0, y0 = math.floor(x_min), math.floor(y_min)
        x1, y1 = math.ceil(x_max), math.ceil(y_max)
        if sensor_w is not None:
            x0, x1 = max(x0, 0), min(x1, sensor_w - 1)
        if sensor_h is not None:
            y0, y1 = max(y0, 0), min(y1, sensor_h - 1)
        return cls(x0, y0, max(x1 - x0 + 1, 0), max(y1 - y0 + 1, 0))

    def contains(self, x, y):
        return (x >= self.x0) & (x < self.x0 + self.w) & (y >= self.y0) & (y < self.y0 + self.h)


@dataclass(frozen=True, eq=False)
class LinearTimeSurface:
    values: np.ndarray  # (h, w) seconds, 0 where unoccupied
    occupied: np.ndarray  # (h, w) bool
    t_ref: float
    x0: int = 0
    y0: int = 0

    def __post_init__(self):
        for name in ("values", "occupied"):
            getattr(self, name).flags.writeable = False

    @property
    def window(self) -> PixelRect:
        h, w = self.values.shape
        return PixelRect(self.x0, self.y0, w, h)

    @cached_property
    def gradients(self) -> tuple[np.ndarray, np.ndarray]:
        """Central-difference d/dx, d/dy (seconds/pixel), one-sided at the border."""
        v = self.values
        if min(v.shape) < 2:
            return np.zeros_like(v), np.zeros_like(v)
        gy, gx = np.gradient(v)
        return gx, gy

    @cached_property
    def hessian_norm(self) -> np.ndarray:
        """Frobenius norm of the 3x3-stencil Hessian, replicate-padded border."""
        v = np.pad(self.values, 1, mode="edge")
        c = v[1:-1, 1:-1]
        dxx = v[1:-1, 2:] - 2 * c + v[1:-1, :-2]
        dyy = v[2:, 1:-1] - 2 * c + v[:-2, 1:-1]
        dxy = (v[2:, 2:] - v[:-2, 2:] - v[2:, :-2] + v[:-2, :-2]) / 4.0
        return np.sqrt(dxx**2 + 2 * dxy**2 + dyy**2)

    def occupied_values(self) -> np.ndarray:
        return self.values[self.occupied]

    def dump_pgm(self, path: str | Path) -> None:
        """Debug view: min-max scaled PGM plus a sidecar with t_ref and scaling."""
        lo, hi = write_pgm(self.values, path)
        Path(str(path) + ".txt").write_text(
            f"t_ref_s {self.t_ref!r}\nx0 {self.x0}\ny0 {self.y0}\nmin_s {lo!r}\nmax_s {hi!r}\n"
        )


def median_reference_time(slc: EventSlice) -> float:
    """Lower median of the event timestamps, in seconds."""
    n = len(slc)
    if n == 0:
        raise EmptySlice("cannot take the median of an empty slice")
    # slices are time sorted
    return int(slc.t_us[(n - 1) // 2]) / US_PER_S


def render_lts(slc: EventSlice, t_ref: float, window: PixelRect) -> LinearTimeSurface:
    x0, y0, w, h = window
    values = np.zeros((h, w))
    occupied = np.zeros((h, w), dtype=bool)
    inside = window.contains(slc.x, slc.y)
    if np.any(inside):
        idx = (slc.y[inside] - y0).astype(np.int64) * w + (slc.x[inside] - x0)
        t_us = slc.t_us[inside]
        dt = t_us / US_PER_S - t_ref
        # distance measured on the microsecond grid so equal offsets tie exactly;
        # lexsort is stable and events are time ordered: ties keep the earlier event
        order = np.lexsort((np.abs(t_us - t_ref * US_PER_S), idx))
        first = np.ones(len(order), dtype=bool)
        first[1:] = idx[order][1:] != idx[order][:-1]
        sel = order[first]
        values.flat[idx[sel]] = dt[sel]
        occupied.flat[idx[sel]] = True
    return LinearTimeSurface(values, occupied, float(t_ref), int(x0), int(y0))


def smooth_bilateral(
    lts: LinearTimeSurface, spatial_sigma: float = 1.5, range_sigma: float | None = None
) -> LinearTimeSurface:
    """Bilateral filter over occupied pixels only; the mask is left untouched.

    ``range_sigma=None`` or ``inf`` gives a plain (mask-normalised) Gaussian.
    """
    if spatial_sigma <= 0 or (range_sigma is not None and range_sigma <= 0):
        raise ValueError("sigmas must be positive")
    occ = lts.occupied
    rows, cols = np.nonzero(occ)
    if len(rows) == 0:
        return lts
    r = int(math.ceil(3 * spatial_sigma))
    vp = np.pad(lts.values, r)
    mp = np.pad(occ, r)
    vc = lts.values[rows, cols]
    inv_range = 0.0 if range_sigma is None or math.isinf(range_sigma) else 1.0 / (2 * range_sigma**2)
    num = np.zeros(len(rows))
    den = np.zeros(len(rows))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = math.exp(-(dx * dx + dy * dy) / (2 * spatial_sigma**2))
            rr, cc = rows + r + dy, cols + r + dx
            m = mp[rr, cc]
            vn = vp[rr, cc]
            wgt = ws * m
            if inv_range:
                wgt = wgt * np.exp(-((vn - vc) ** 2) * inv_range)
            num += wgt * vn
            den += wgt
    out = np.zeros_like(lts.values)
    out[rows, cols] = num / den
    return LinearTimeSurface(out, occ.copy(), lts.t_ref, lts.x0, lts.y0)


def fill_unoccupied(lts: LinearTimeSurface) -> LinearTimeSurface:
    """Give each empty pixel the value of its nearest occupied pixel.

    Left at zero, empty pixels read as lying on the reference contour, so
    the registration could park events there at no cost. The result is
    fully occupied; keep the input around for statistics over real data.
    """
    if lts.occupied.all() or not lts.occupied.any():
        return lts
    idx = ndimage.distance_transform_edt(~lts.occupied, return_distances=False, return_indices=True)
    filled = lts.values[idx[0], idx[1]]
    return LinearTimeSurface(filled, np.ones_like(lts.occupied), lts.t_ref, lts.x0, lts.y0)


def _bilinear(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    i0 = np.minimum(i0, grid.shape[1] - 2)
    j0 = np.minimum(j0, grid.shape[0] - 2)
    fu = u - i0
    fv = v - j0
    return (
        grid[j0, i0] * (1 - fu) * (1 - fv)
        + grid[j0, i0 + 1] * fu * (1 - fv)
        + grid[j0 + 1, i0] * (1 - fu) * fv
        + grid[j0 + 1, i0 + 1] * fu * fv
    )


def sample_many(lts: LinearTimeSurface, px: np.ndarray):
    """Vectorised sampling at pixel positions ``px`` (N, 2).

    Returns ``(values, gradients (N, 2), valid)``; entries outside the window
    interior are zero and flagged invalid.
    """
    px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
    h, w = lts.values.shape
    u = px[:, 0] - lts.x0
    v = px[:, 1] - lts.y0
    valid = (u >= 1) & (u <= w - 2) & (v >= 1) & (v <= h - 2)
    val = np.zeros(len(px))
    grad = np.zeros((len(px), 2))
    if np.any(valid):
        uu, vv = u[valid], v[valid]
        gx, gy = lts.gradients
        val[valid] = _bilinear(lts.values, uu, vv)
        grad[valid, 0] = _bilinear(gx, uu, vv)
        grad[valid, 1] = _bilinear(gy, uu, vv)
    return val, grad, valid


def sample_value_and_gradient(lts: LinearTimeSurface, p) -> tuple[float, np.ndarray]:
    """Bilinear value and central-difference gradient at sub-pixel ``p``."""
    val, grad, valid = sample_many(lts, np.asarray(p, dtype=np.float64)[None, :])
    if not valid[0]:
        raise OutOfWindow(f"{tuple(p)} is not inside the interior of {lts.window}")
    return float(val[0]), grad[0]


@dataclass(frozen=True, eq=False)
class SampledEventSet:
    indices: np.ndarray  # into the source slice
    px: np.ndarray  # (N, 2) pixel coordinates
    p: np.ndarray  # (N, 2) normalized coordinates
    t: np.ndarray  # seconds

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def from_slice(cls, slc: EventSlice, intr: CameraIntrinsics, indices=None) -> "SampledEventSet":
        if indices is None:
            indices = np.arange(len(slc))
        indices = np.asarray(indices, dtype=np.int64)
        px = slc.pixels()[indices]
        return cls(indices, px, pixel_to_normalized(intr, px), slc.t[indices])

    def subset(self, mask) -> "SampledEventSet":
        return SampledEventSet(self.indices[mask], self.px[mask], self.p[mask], self.t[mask])


def robust_sample(
    lts: LinearTimeSurface,
    slc: EventSlice,
    intr: CameraIntrinsics,
    g1_min: float = 1e-5,
    g2_max: float = 1e-3,
) -> SampledEventSet:
    """Keep events whose pixel has |grad T| > g1_min and |Hess T|_F < g2_max."""
    inside = np.nonzero(lts.window.contains(slc.x, slc.y))[0]
    rows = slc.y[inside] - lts.y0
    cols = slc.x[inside] - lts.x0
    gx, gy = lts.gradients
    g1 = np.hypot(gx[rows, cols], gy[rows, cols])
    g2 = lts.hessian_norm[rows, cols]
    keep = (g1 > g1_min) & (g2 < g2_max)
    return SampledEventSet.from_slice(slc, intr, inside[keep])
