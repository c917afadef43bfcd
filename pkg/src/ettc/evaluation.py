"""Accuracy metrics and motion-compensation quality (image of warped events)."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .events import CameraIntrinsics, EventSlice
from .imageio import write_pgm
from .registration import warp_event, warp_event_constant_model


class ZeroGroundTruth(ValueError):
    pass


def relative_ttc_error(t_gt: float, t_est: float) -> float:
    """``|t_gt - t_est| / |t_gt|`` in percent."""
    if t_gt == 0:
        raise ZeroGroundTruth("ground-truth TTC is zero")
    return abs((t_gt - t_est) / t_gt) * 100.0


def relative_ttc_errors(t_gt, t_est) -> np.ndarray:
    t_gt = np.asarray(t_gt, dtype=np.float64)
    t_est = np.asarray(t_est, dtype=np.float64)
    if np.any(t_gt == 0):
        raise ZeroGroundTruth("ground-truth TTC is zero")
    return np.abs((t_gt - t_est) / t_gt) * 100.0


@dataclass(frozen=True, eq=False)
class IWE:
    grid: np.ndarray  # (h, w) bilinearly splatted event counts
    t_ref: float
    model: str  # "tv" or "const"

    def dump_pgm(self, path: str | Path) -> None:
        write_pgm(self.grid, path)


def build_iwe(
    slc: EventSlice,
    a,
    t_ref: float,
    intr: CameraIntrinsics,
    resolution: tuple[int, int] | None = None,
    model: str = "tv",
    t0: float | None = None,
) -> IWE:
    """Warp every event to ``t_ref`` and splat it bilinearly.

    ``model="tv"`` uses the time-variant warp with ``a = nu / Z(t_ref)``;
    ``model="const"`` uses the constant-flow warp with ``a = nu / Z(t0)``
    (``t0`` defaults to the slice start).
    """
    if len(slc) == 0:
        raise ValueError("empty slice")
    w, h = resolution or (intr.width, intr.height)
    p = slc.normalized(intr)
    t = slc.t
    if model == "tv":
        q = warp_event(p, t, t_ref, a)
    elif model == "const":
        q = warp_event_constant_model(p, t, t_ref, a, slc.t_begin if t0 is None else t0)
    else:
        raise ValueError(f"unknown warp model {model!r}")
    u = q[:, 0] * intr.fx + intr.cx
    v = q[:, 1] * intr.fy + intr.cy
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu, fv = u - i0, v - j0
    grid = np.zeros(h * w)
    # each corner is dropped on its own when it falls off the grid
    for di, dj, wgt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
                        (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        ii, jj = i0 + di, j0 + dj
        on = (ii >= 0) & (ii < w) & (jj >= 0) & (jj < h) & (wgt > 0)
        grid += np.bincount(jj[on] * w + ii[on], weights=wgt[on], minlength=h * w)
    return IWE(grid.reshape(h, w), float(t_ref), model)


def contrast(iwe: IWE | np.ndarray) -> float:
    """Variance of the IWE grid."""
    g = iwe.grid if isinstance(iwe, IWE) else np.asarray(iwe)
    return float(np.var(g))


def best_constant_model(
    slc: EventSlice,
    t_ref: float,
    intr: CameraIntrinsics,
    center: np.ndarray,
    spans: np.ndarray,
    steps: int = 7,
    rounds: int = 3,
    metric: Callable = contrast,
    resolution=None,
) -> tuple[np.ndarray, float]:
    """Coarse-to-fine grid search of the constant-model parameter.

    Each round evaluates a ``steps**3`` grid around the incumbent and then
    shrinks the spans by the grid spacing.
    """
    best = np.asarray(center, dtype=np.float64)
    spans = np.asarray(spans, dtype=np.float64)
    best_val = -math.inf
    for _ in range(rounds):
        axes = [np.linspace(c - s, c + s, steps) for c, s in zip(best, spans)]
        incumbent = best
        for cand in itertools.product(*axes):
            val = metric(build_iwe(slc, cand, t_ref, intr, resolution, model="const"))
            if val > best_val:
                best_val, incumbent = val, np.array(cand)
        best = incumbent
        spans = 2 * spans / (steps - 1)
    return best, best_val


def write_metrics_csv(rows: list[dict], path: str | Path, fields: list[str] | None = None) -> None:
    fields = fields or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
