"""Per-event normal flow from local plane fits to the event cloud.

Around each event a plane ``t = c0 + c1*u + c2*v`` is fitted to the events
within a pixel radius and time window. The plane's spatial gradient gives
the normal flow ``(c1, c2) / (c1**2 + c2**2)``: its direction is the local
gradient of the event surface and its magnitude the inverse slowness.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.spatial import cKDTree

from .events import CameraIntrinsics, EventSlice, pixel_to_normalized


@dataclass(frozen=True)
class NormalFlowMeasurement:
    p: np.ndarray  # normalized position
    n: np.ndarray  # normalized units / s
    t: float
    px: np.ndarray


@dataclass(frozen=True, eq=False)
class NormalFlowField:
    """Column-wise batch of measurements, as consumed by the linear solver."""

    p: np.ndarray  # (N, 2)
    n: np.ndarray  # (N, 2)
    t: np.ndarray  # (N,)
    px: np.ndarray | None = None  # (N, 2)
    indices: np.ndarray | None = None  # into the source slice
    dropped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "n", np.asarray(self.n, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(-1))
        if not (len(self.p) == len(self.n) == len(self.t)):
            raise ValueError("measurement columns differ in length")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[NormalFlowMeasurement]:
        px = self.px if self.px is not None else np.full_like(self.p, np.nan)
        for i in range(len(self)):
            yield NormalFlowMeasurement(self.p[i], self.n[i], float(self.t[i]), px[i])

    def subset(self, idx) -> "NormalFlowField":
        return NormalFlowField(
            self.p[idx], self.n[idx], self.t[idx],
            None if self.px is None else self.px[idx],
            None if self.indices is None else self.indices[idx],
        )

    @classmethod
    def from_measurements(cls, ms) -> "NormalFlowField":
        ms = list(ms)
        return cls(
            np.array([m.p for m in ms]).reshape(-1, 2),
            np.array([m.n for m in ms]).reshape(-1, 2),
            np.array([m.t for m in ms], dtype=np.float64),
            np.array([m.px for m in ms]).reshape(-1, 2),
        )

    def to_csv(self, path: str | Path) -> None:
        px = self.px if self.px is not None else np.full_like(self.p, np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "px", "py", "nx", "ny"])
            for t, (u, v), (nx, ny) in zip(self.t, px, self.n):
                w.writerow([repr(float(t)), repr(float(u)), repr(float(v)), repr(float(nx)), repr(float(ny))])


@dataclass
class NormalFlowConfig:
    radius_px: float = 3.0
    dt_window_s: float | None = None  # None: the slice duration
    min_events: int = 8
    max_residual: float | None = None  # None: 30 % of dt_window_s
    refine_passes: int = 3
    trim_sigmas: float = 2.0
    min_time_spread_s: float = 1e-4
    min_spread_px: float = 1.0


def synthesize_normal_flow(full_flow, direction) -> np.ndarray:
    """Project a full flow onto a unit gradient direction (works on (..., 2))."""
    u = np.asarray(full_flow, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return np.sum(u * d, axis=-1, keepdims=True) * d


def estimate_normal_flow(
    slc: EventSlice,
    intr: CameraIntrinsics,
    cfg: NormalFlowConfig | None = None,
    centers=None,
) -> NormalFlowField:
    """Fit one plane per event (or per event in ``centers``, an index array).

    Neighbours are always drawn from the whole slice. Output keeps the input
    order; ``dropped`` counts centres that failed a check.
    """
    cfg = cfg or NormalFlowConfig()
    dt_window = cfg.dt_window_s if cfg.dt_window_s is not None else max(slc.duration, 1e-6)
    max_res = cfg.max_residual if cfg.max_residual is not None else 0.3 * dt_window
    centers = np.arange(len(slc)) if centers is None else np.asarray(centers, dtype=np.int64)
    n_ev = len(centers)
    empty = NormalFlowField(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)),
                            np.zeros(0, dtype=np.int64), dropped=n_ev)
    if n_ev == 0:
        return empty

    xy_all = slc.pixels()
    t_all = slc.t
    xy, t = xy_all[centers], t_all[centers]
    pairs = cKDTree(xy).sparse_distance_matrix(cKDTree(xy_all), cfg.radius_px, output_type="ndarray")
    i = pairs["i"].astype(np.int64)
    j = pairs["j"].astype(np.int64)
    close = np.abs(t_all[j] - t[i]) <= dt_window
    i, j = i[close], j[close]

    # moments of the neighbourhood, centred on the event for conditioning
    du = xy_all[j, 0] - xy[i, 0]
    dv = xy_all[j, 1] - xy[i, 1]
    dt = t_all[j] - t[i]

    def fit(w):
        def acc(v=None):
            return np.bincount(i, weights=w if v is None else w * v, minlength=n_ev)

        cnt = acc()
        su, sv, st = acc(du), acc(dv), acc(dt)
        suu, suv, svv = acc(du * du), acc(du * dv), acc(dv * dv)
        sut, svt, stt = acc(du * dt), acc(dv * dt), acc(dt * dt)
        A = np.empty((n_ev, 3, 3))
        A[:, 0] = np.stack([cnt, su, sv], -1)
        A[:, 1] = np.stack([su, suu, suv], -1)
        A[:, 2] = np.stack([sv, suv, svv], -1)
        b = np.stack([st, sut, svt], -1)
        # scale-aware singularity guard: spatial spread must span two directions
        det = np.linalg.det(A)
        ok = (cnt >= cfg.min_events) & (np.abs(det) > 1e-9 * np.maximum(cnt, 1) ** 3)
        coef = np.zeros((n_ev, 3))
        if np.any(ok):
            coef[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
        ssr = stt - np.einsum("ij,ij->i", coef, b)
        rms = np.sqrt(np.maximum(ssr, 0.0) / np.maximum(cnt, 1))
        # spread of the neighbourhood along the fitted gradient direction
        c = np.maximum(cnt, 1)
        mu, mv = su / c, sv / c
        cuu, cuv, cvv = suu / c - mu * mu, suv / c - mu * mv, svv / c - mv * mv
        g = np.hypot(coef[:, 1], coef[:, 2])
        gu, gv = np.divide(coef[:, 1], g, out=np.zeros(n_ev), where=g > 0), np.divide(coef[:, 2], g, out=np.zeros(n_ev), where=g > 0)
        spread = np.sqrt(np.maximum(gu * gu * cuu + 2 * gu * gv * cuv + gv * gv * cvv, 0.0))
        return coef, rms, ok, spread

    # Neighbourhoods often straddle two event sheets (parallel edges passing
    # by at different times). Refit on pairs close to the current plane so
    # the fit locks onto the sheet through the centre event.
    w = np.ones(len(i))
    for _ in range(cfg.refine_passes + 1):
        coef, rms, ok, spread = fit(w)
        e = dt - (coef[i, 0] + coef[i, 1] * du + coef[i, 2] * dv)
        w_new = (np.abs(e) <= cfg.trim_sigmas * np.maximum(rms[i], cfg.min_time_spread_s)).astype(np.float64)
        if np.array_equal(w_new, w):
            break
        w = w_new

    # slowness in normalized units: d t / d x = (d t / d u) * fx
    c1 = coef[:, 1] * intr.fx
    c2 = coef[:, 2] * intr.fy
    g2 = c1 * c1 + c2 * c2
    # an edge that crosses less than a pixel inside the window gives a thin
    # strip of rounded pixel positions, and the slope is then biased flat
    ok &= (rms <= max_res) & (g2 > 0) & np.isfinite(g2) & (spread >= cfg.min_spread_px)

    keep = np.nonzero(ok)[0]
    if len(keep) == 0:
        return empty
    n = np.stack([c1[keep], c2[keep]], -1) / g2[keep, None]
    return NormalFlowField(
        p=pixel_to_normalized(intr, xy[keep]),
        n=n,
        t=t[keep],
        px=xy[keep],
        indices=centers[keep],
        dropped=int(n_ev - len(keep)),
    )
