"""Analytic event simulator for constant-velocity approach scenes.

A rigid, fronto-parallel contour (all points share one depth) moves with a
constant relative velocity ``nu`` (``nu_z > 0`` closes the gap,
``dP/dt = -nu``). Its projection has a closed form, so crossing times, the
true affine parameters ``nu / Z(t)`` and the TTC ``Z(t) / nu_z`` are exact.

Events are geometric: every contour point emits one event each time its
projected pixel position has advanced by another ``event_pixel_step``
pixels. Polarity is set from the sign of the radial motion, which is a
convenience: the estimator never looks at it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .events import US_PER_S, BoundingBox, CameraIntrinsics, EventSlice
from .linear_solver import AffineParams
from .normal_flow import NormalFlowField, synthesize_normal_flow


class BehindCamera(ValueError):
    pass


DEFAULT_INTRINSICS = CameraIntrinsics(fx=500.0, fy=500.0, cx=319.5, cy=239.5, width=640, height=480)


@dataclass(frozen=True, eq=False)
class SceneConfig:
    contour: np.ndarray  # (N, 3) metres, observer frame
    nu: np.ndarray  # (3,) m/s
    intr: CameraIntrinsics = DEFAULT_INTRINSICS
    t_span: float = 1.0
    event_pixel_step: float = 1.0
    timestamp_jitter_sigma: float = 1e-4
    outlier_fraction: float = 0.0
    rng_seed: int = 0
    box_rate_hz: float = 20.0
    normals: np.ndarray | None = None  # (N, 2) unit edge normals in the image, optional

    def __post_init__(self):
        c = np.asarray(self.contour, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "contour", c)
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=np.float64).reshape(3))
        if self.normals is not None:
            object.__setattr__(self, "normals", np.asarray(self.normals, dtype=np.float64).reshape(-1, 2))
        if len(c) == 0:
            raise ValueError("contour is empty")
        z0 = c[:, 2]
        if np.ptp(z0) > 1e-9 * max(1.0, float(np.abs(z0).max())):
            raise ValueError("contour points must share one depth (fronto-parallel object)")
        if z0[0] <= 0 or z0[0] - self.nu[2] * self.t_span <= 0:
            raise ValueError("object must stay in front of the camera over t_span")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must be in [0, 1)")

    @property
    def depth0(self) -> float:
        return float(self.contour[0, 2])

    def depth(self, t) -> np.ndarray:
        return self.depth0 - self.nu[2] * np.asarray(t, dtype=np.float64)


def trajectory(P0, nu, t) -> np.ndarray:
    """Exact normalized image position at ``t`` of a point at ``P0`` when t=0."""
    P0 = np.asarray(P0, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    Z = P0[..., 2] - nu[2] * t
    if np.any(Z <= 0):
        raise BehindCamera("point is at or behind the camera plane")
    return np.stack([(P0[..., 0] - nu[0] * t) / Z, (P0[..., 1] - nu[1] * t) / Z], axis=-1)


def image_flow(p, nu, Z) -> np.ndarray:
    """Instantaneous optical flow of a normalized point at depth ``Z``."""
    p = np.asarray(p, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    return np.stack([-nu[0] + p[..., 0] * nu[2], -nu[1] + p[..., 1] * nu[2]], axis=-1) / Z[..., None]


@dataclass(frozen=True, eq=False)
class GroundTruth:
    scene: SceneConfig

    def affine(self, t_ref: float) -> AffineParams:
        return AffineParams.from_vector(self.scene.nu / float(self.scene.depth(t_ref)), t_ref)

    def ttc(self, t) -> np.ndarray | float:
        z = self.scene.depth(t)
        return z / self.scene.nu[2] if self.scene.nu[2] != 0 else np.full_like(z, np.inf)

    def trajectory(self, P0, t) -> np.ndarray:
        return trajectory(P0, self.scene.nu, t)

    def box(self, t: float) -> BoundingBox:
        intr = self.scene.intr
        p = trajectory(self.scene.contour, self.scene.nu, t)
        u = p[:, 0] * intr.fx + intr.cx
        v = p[:, 1] * intr.fy + intr.cy
        return BoundingBox(float(t), float(u.min()), float(v.min()), float(u.max()), float(v.max()), 1)

    def box_track(self, rate_hz: float | None = None) -> list[BoundingBox]:
        rate = rate_hz or self.scene.box_rate_hz
        n = int(math.floor(self.scene.t_span * rate + 1e-9)) + 1
        return [self.box(i / rate) for i in range(n)]

    def table(self, times) -> list[dict]:
        rows = []
        for t in np.asarray(times, dtype=np.float64):
            a = self.scene.nu / float(self.scene.depth(t))
            rows.append({"t_s": float(t), "ttc_s": float(self.ttc(t)),
                         "a_x": a[0], "a_y": a[1], "a_z": a[2]})
        return rows

    def write_csv(self, path: str | Path, step: float = 1e-3) -> None:
        times = np.arange(0.0, self.scene.t_span + 0.5 * step, step)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["t_s", "ttc_s", "a_x", "a_y", "a_z"])
            w.writeheader()
            for row in self.table(times):
                w.writerow({k: repr(float(v)) for k, v in row.items()})


def read_ground_truth_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in ("t_s", "ttc_s", "a_x", "a_y", "a_z")}


def _crossings(scene: SceneConfig):
    """Per-point crossing times of the pixel-advance thresholds.

    The image displacement since t=0 is ``dirv * t / Z(t)`` with a fixed
    direction per point, so the advance along any fixed direction is
    monotone and the crossings have a closed form. With edge normals the
    advance is measured along the normal (an edge sliding along itself does
    not fire); otherwise along the full path.
    """
    P0 = scene.contour
    nu = scene.nu
    intr = scene.intr
    Z0 = scene.depth0
    p0 = P0[:, :2] / Z0
    # pixel displacement from t=0 is |F (p0 nu_z - nu_xy)| * t / Z(t)
    dirv = np.column_stack([(p0[:, 0] * nu[2] - nu[0]) * intr.fx, (p0[:, 1] * nu[2] - nu[1]) * intr.fy])
    if scene.normals is not None:
        c = np.abs(np.einsum("ij,ij->i", dirv, scene.normals))
    else:
        c = np.hypot(dirv[:, 0], dirv[:, 1])
    T = scene.t_span
    d_end = c * T / (Z0 - nu[2] * T)
    step = scene.event_pixel_step
    k_max = np.floor(d_end / step * (1 + 1e-12)).astype(np.int64)
    k_max[c == 0] = 0
    point = np.repeat(np.arange(len(P0)), k_max)
    starts = np.cumsum(k_max) - k_max
    k = np.arange(len(point)) - np.repeat(starts, k_max) + 1
    d = k * step
    t = d * Z0 / (c[point] + d * nu[2])
    return point, t


def generate_events(scene: SceneConfig) -> tuple[EventSlice, GroundTruth]:
    rng = np.random.default_rng(scene.rng_seed)
    intr = scene.intr
    point, t = _crossings(scene)
    p = trajectory(scene.contour[point], scene.nu, t)
    u = np.rint(p[:, 0] * intr.fx + intr.cx).astype(np.int64)
    v = np.rint(p[:, 1] * intr.fy + intr.cy).astype(np.int64)
    flow = image_flow(p, scene.nu, scene.depth(t))
    pol = np.where(np.einsum("ij,ij->i", p, flow) >= 0, 1, -1)
    if scene.timestamp_jitter_sigma > 0:
        t = t + rng.normal(0.0, scene.timestamp_jitter_sigma, size=len(t))
    t_us = np.clip(np.rint(t * US_PER_S), 0, round(scene.t_span * US_PER_S)).astype(np.int64)
    on = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    u, v, t_us, pol = u[on], v[on], t_us[on], pol[on]

    gt = GroundTruth(scene)
    if scene.outlier_fraction > 0 and len(t_us):
        n_out = int(round(scene.outlier_fraction * len(t_us) / (1 - scene.outlier_fraction)))
        # clutter is spread over the region the object sweeps, so cropping keeps it
        region = gt.box(0.0).union(gt.box(scene.t_span)).expanded(5.0)
        x_lo, x_hi = max(region.x_min, 0), min(region.x_max, intr.width - 1)
        y_lo, y_hi = max(region.y_min, 0), min(region.y_max, intr.height - 1)
        ou = np.rint(rng.uniform(x_lo, x_hi, n_out)).astype(np.int64)
        ov = np.rint(rng.uniform(y_lo, y_hi, n_out)).astype(np.int64)
        ot = rng.integers(0, round(scene.t_span * US_PER_S) + 1, n_out)
        op = rng.choice([-1, 1], n_out)
        u, v = np.concatenate([u, ou]), np.concatenate([v, ov])
        t_us, pol = np.concatenate([t_us, ot]), np.concatenate([pol, op])

    slc = EventSlice.from_arrays(u, v, t_us, pol, width=intr.width, height=intr.height,
                                 t_begin=0.0, t_end=scene.t_span)
    return slc, gt


def ground_truth_measurements(
    scene: SceneConfig,
    t_ref: float,
    times=None,
    directions=None,
    angle: float = 0.0,
) -> NormalFlowField:
    """Exact normal-flow measurements of the contour points.

    Full flows come from the instantaneous flow equation at each sample time
    and are projected onto ``directions`` (per-point unit vectors; default
    the scene's edge normals, else the flow direction itself), optionally
    rotated by ``angle`` radians. Measurements with zero normal flow are
    dropped.
    """
    times = np.linspace(0.0, scene.t_span, 5) if times is None else np.atleast_1d(times)
    n_pts = len(scene.contour)
    if directions is None:
        directions = scene.normals
    ps, ns, ts = [], [], []
    for t in times:
        p = trajectory(scene.contour, scene.nu, t)
        u = image_flow(p, scene.nu, np.full(n_pts, scene.depth(t)))
        if directions is None:
            norm = np.linalg.norm(u, axis=1, keepdims=True)
            d = np.divide(u, norm, out=np.zeros_like(u), where=norm > 0)
        else:
            d = np.asarray(directions, dtype=np.float64).reshape(n_pts, 2)
        if angle:
            c, s = math.cos(angle), math.sin(angle)
            d = d @ np.array([[c, s], [-s, c]])
        n = synthesize_normal_flow(u, d)
        keep = np.einsum("ij,ij->i", n, n) > 1e-24
        ps.append(p[keep]); ns.append(n[keep]); ts.append(np.full(keep.sum(), float(t)))
    return NormalFlowField(np.concatenate(ps), np.concatenate(ns), np.concatenate(ts))


# ---------------------------------------------------------------------------
# contour builders

def rectangle_outline(x0, y0, x1, y1, depth, spacing):
    """Points along a rectangle at constant depth, with outward edge normals."""
    pts, nrm = [], []
    for (ax, ay), (bx, by), n in (
        ((x0, y0), (x1, y0), (0.0, -1.0)),
        ((x1, y0), (x1, y1), (1.0, 0.0)),
        ((x1, y1), (x0, y1), (0.0, 1.0)),
        ((x0, y1), (x0, y0), (-1.0, 0.0)),
    ):
        length = math.hypot(bx - ax, by - ay)
        k = max(int(math.ceil(length / spacing)), 1)
        s = (np.arange(k) + 0.5) / k
        pts.append(np.column_stack([ax + (bx - ax) * s, ay + (by - ay) * s, np.full(k, depth)]))
        nrm.append(np.tile(n, (k, 1)))
    return np.concatenate(pts), np.concatenate(nrm)


def car_rear_contour(width=1.8, height=1.3, center=(0.0, 0.0), depth=10.0, spacing=0.004):
    """Outline of a car's rear body plus the inner part outlines listed below."""
    cx, cy = center
    hw, hh = width / 2, height / 2
    # inner parts sit at least 15 % of the half-size away from every other
    # outline, so their sweeps do not overlap within one slice
    parts = [
        (cx - hw, cy - hh, cx + hw, cy + hh),  # body
        (cx - 0.7 * hw, cy - 0.8 * hh, cx + 0.7 * hw, cy - 0.25 * hh),  # rear window
        (cx - 0.85 * hw, cy + 0.05 * hh, cx - 0.55 * hw, cy + 0.35 * hh),  # left lamp
        (cx + 0.55 * hw, cy + 0.05 * hh, cx + 0.85 * hw, cy + 0.35 * hh),  # right lamp
        (cx - 0.3 * hw, cy + 0.5 * hh, cx + 0.3 * hw, cy + 0.8 * hh),  # plate
    ]
    pts, nrm = zip(*(rectangle_outline(*r, depth, spacing) for r in parts))
    return np.concatenate(pts), np.concatenate(nrm)


def approach_scenario(
    seed: int,
    ttc_start: float = 3.0,
    ttc_end: float = 0.5,
    intr: CameraIntrinsics = DEFAULT_INTRINSICS,
    event_pixel_step: float = 0.5,
    timestamp_jitter_sigma: float = 1e-4,
    outlier_fraction: float = 0.0,
    spacing: float | None = None,
) -> SceneConfig:
    """A randomised leading-car approach going from ``ttc_start`` to ``ttc_end``."""
    rng = np.random.default_rng(seed)
    nu_z = rng.uniform(3.0, 5.0)
    depth = ttc_start * nu_z
    width = rng.uniform(1.6, 1.9)
    height = rng.uniform(1.1, 1.35)
    center = (rng.uniform(-0.15, 0.15), rng.uniform(-0.05, 0.1))
    nu = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.03, 0.03), nu_z])
    z_end = ttc_end * nu_z
    if spacing is None:
        spacing = z_end / intr.fx  # about one pixel apart at the closest approach
    contour, normals = car_rear_contour(width, height, center, depth, spacing)
    return SceneConfig(
        contour=contour, nu=nu, intr=intr, t_span=ttc_start - ttc_end,
        event_pixel_step=event_pixel_step, timestamp_jitter_sigma=timestamp_jitter_sigma,
        outlier_fraction=outlier_fraction, rng_seed=seed, normals=normals,
    )


# ---------------------------------------------------------------------------
# JSON scene files

def scene_from_dict(d: dict) -> SceneConfig:
    """Build a scene from JSON-style data.

    ``{"scenario": "approach", "seed": 3, ...}`` forwards the remaining keys
    to :func:`approach_scenario`; anything else is a literal scene with a
    ``contour`` (point list or shape description) and ``nu``.
    """
    intr = CameraIntrinsics.from_dict(d["intrinsics"]) if "intrinsics" in d else DEFAULT_INTRINSICS
    if d.get("scenario") is not None:
        if d["scenario"] != "approach":
            raise ValueError(f"unknown scenario {d['scenario']!r}")
        kw = {k: v for k, v in d.items() if k not in ("scenario", "intrinsics", "box_rate_hz")}
        scene = approach_scenario(intr=intr, **{"seed": 0, **kw})
        return replace(scene, box_rate_hz=float(d.get("box_rate_hz", scene.box_rate_hz)))
    normals = None
    contour = d["contour"]
    if isinstance(contour, dict):
        shape = contour.get("shape", "car_rear")
        kw = {k: v for k, v in contour.items() if k != "shape"}
        if shape == "car_rear":
            if "center" in kw:
                kw["center"] = tuple(kw["center"])
            contour, normals = car_rear_contour(**kw)
        elif shape == "rectangle":
            contour, normals = rectangle_outline(
                kw["x0"], kw["y0"], kw["x1"], kw["y1"], kw["depth"], kw.get("spacing", 0.01))
        else:
            raise ValueError(f"unknown contour shape {shape!r}")
    return SceneConfig(
        contour=np.asarray(contour, dtype=np.float64),
        nu=np.asarray(d["nu"], dtype=np.float64),
        intr=intr,
        t_span=float(d.get("t_span", 1.0)),
        event_pixel_step=float(d.get("event_pixel_step", 1.0)),
        timestamp_jitter_sigma=float(d.get("timestamp_jitter_sigma", 1e-4)),
        outlier_fraction=float(d.get("outlier_fraction", 0.0)),
        rng_seed=int(d.get("rng_seed", 0)),
        box_rate_hz=float(d.get("box_rate_hz", 20.0)),
        normals=normals,
    )


def load_scene(path: str | Path, seed: int | None = None) -> SceneConfig:
    scene = scene_from_dict(json.loads(Path(path).read_text()))
    return replace(scene, rng_seed=seed) if seed is not None else scene
