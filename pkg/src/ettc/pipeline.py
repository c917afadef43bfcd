"""End-to-end TTC estimation over an event stream and a bounding-box track.

The first slice (and any slice after a reset) is solved from scratch: LTS,
robust sampling, normal flow, RANSAC, then LM. Later slices only run LM,
warm-started from the previous estimate carried over to the new reference
time. Slice length follows the predicted image expansion rate.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Iterator, Sequence

import numpy as np

from .events import BoundingBox, CameraIntrinsics, EventSlice, crop_to_volume, pixel_to_normalized, normalized_to_pixel
from .linear_solver import TTC, AffineParams, RansacConfig, SolverError, ransac_fit, ttc_from_params
from .lts import PixelRect, fill_unoccupied, median_reference_time, render_lts, robust_sample, smooth_bilateral
from .normal_flow import NormalFlowConfig, estimate_normal_flow
from .registration import LmConfig, affine_flow, lm_refine

log = logging.getLogger(__name__)


class CollisionPassed(ValueError):
    pass


@dataclass
class PipelineConfig:
    target_scale_change: float = 0.05
    min_slice_duration: float = 0.002
    max_slice_duration: float = 0.05
    min_events: int = 500
    crop_margin: float = 2.0
    window_border: int = 4
    spatial_sigma: float = 1.5
    range_sigma: float | None = None  # None: half the slice duration
    fill_unoccupied: bool = True
    warm_start: bool = True  # False: every slice is initialised by RANSAC
    g1_min: float = 1e-5
    g2_max: float = 1e-3
    max_flow_centers: int = 4000
    rms_reset_factor: float = 3.0
    max_out_of_window: float = 0.5
    min_az: float = 1e-3
    normal_flow: NormalFlowConfig = field(default_factory=NormalFlowConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    lm: LmConfig = field(default_factory=LmConfig)

    def __post_init__(self):
        if self.min_slice_duration > self.max_slice_duration:
            raise ValueError("min_slice_duration must not exceed max_slice_duration")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            d = {**PRESETS[preset], **d}
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            sub = {"normal_flow": NormalFlowConfig, "ransac": RansacConfig, "lm": LmConfig}.get(f.name)
            kw[f.name] = sub(**d[f.name]) if sub else d[f.name]
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {g.name: getattr(v, g.name) for g in fields(v)} if is_dataclass(v) else v
        return out


# Slow approaches (TTC of seconds) move contours by well under a pixel in a
# 50 ms slice, which starves the registration. This preset lets slices grow
# until the scale changes by 15 %, and loosens the curvature filter that
# the longer sweeps need.
PRESETS: dict[str, dict] = {
    "default": {},
    "sim-approach": {"target_scale_change": 0.15, "max_slice_duration": 0.5, "g2_max": 1e-2},
}


@dataclass(frozen=True)
class TtcEstimate:
    t_ref: float
    ttc: TTC
    params: AffineParams
    n_events: int
    n_inliers: int
    rms: float
    stage: str  # "init" | "refine"
    lm_iterations: int = 0
    lm_stop: str = ""

    CSV_FIELDS = ("t_ref_s", "ttc_s", "a_x", "a_y", "a_z", "n_events", "n_inliers", "rms_s", "stage")

    def csv_row(self) -> dict:
        return {
            "t_ref_s": repr(self.t_ref), "ttc_s": repr(self.ttc.signed),
            "a_x": repr(self.params.a_x), "a_y": repr(self.params.a_y), "a_z": repr(self.params.a_z),
            "n_events": self.n_events, "n_inliers": self.n_inliers, "rms_s": repr(self.rms),
            "stage": self.stage,
        }


def propagate_params(a: AffineParams, t_ref_new: float) -> AffineParams:
    """Re-express ``a = nu / Z(t_ref)`` at another reference time (constant nu)."""
    denom = 1.0 - a.a_z * (t_ref_new - a.t_ref)
    if denom <= 0:
        raise CollisionPassed("predicted depth is not positive at the new reference time")
    return AffineParams(a.a_x / denom, a.a_y / denom, a.a_z / denom, t_ref_new)


def predict_bbox(box: BoundingBox, a: AffineParams, dt: float, intr: CameraIntrinsics) -> BoundingBox:
    """Move the box corners forward by ``dt`` with the affine flow ``a``.

    The prediction is exact for constant velocity when ``a`` is expressed at
    the target time ``box.t + dt``.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    c = pixel_to_normalized(intr, box.corners())
    q = normalized_to_pixel(intr, c + affine_flow(c, a) * dt)
    return BoundingBox(box.t + dt, float(q[:, 0].min()), float(q[:, 1].min()),
                       float(q[:, 0].max()), float(q[:, 1].max()), box.track_id)


def next_render_interval(a: AffineParams, cfg: PipelineConfig) -> float:
    """Time for the image scale to change by ``cfg.target_scale_change``."""
    d = cfg.target_scale_change / max(abs(a.a_z), cfg.min_az)
    return min(max(d, cfg.min_slice_duration), cfg.max_slice_duration)


def interpolate_box(boxes: Sequence[BoundingBox], t: float) -> BoundingBox:
    """Corner-wise linear interpolation in time, clamped at the track ends."""
    times = [b.t for b in boxes]
    k = bisect.bisect_right(times, t)
    if k == 0:
        return boxes[0]
    if k == len(boxes):
        return boxes[-1]
    b0, b1 = boxes[k - 1], boxes[k]
    s = (t - b0.t) / (b1.t - b0.t) if b1.t > b0.t else 0.0
    lerp = lambda u, v: u + (v - u) * s  # noqa: E731
    return BoundingBox(t, lerp(b0.x_min, b1.x_min), lerp(b0.y_min, b1.y_min),
                       lerp(b0.x_max, b1.x_max), lerp(b0.y_max, b1.y_max), b0.track_id)


@dataclass
class Diagnostic:
    t: float
    stage: str
    message: str


@dataclass(frozen=True)
class SliceRecord:
    """Where an emitted estimate came from, for offline inspection."""

    t_begin: float
    t_end: float
    box: BoundingBox
    stage: str


class TtcPipeline:
    """Single-threaded estimator; ``run`` yields estimates in ``t_ref`` order."""

    def __init__(self, intr: CameraIntrinsics, cfg: PipelineConfig | None = None):
        self.intr = intr
        self.cfg = cfg or PipelineConfig()
        self.diagnostics: list[Diagnostic] = []
        self.slices: list[SliceRecord] = []

    # -- helpers ---------------------------------------------------------

    def _box_for(self, boxes, t0, t1, a: AffineParams | None) -> BoundingBox:
        if a is not None:
            k = bisect.bisect_right([b.t for b in boxes], t0)
            if k > 0:
                det = boxes[k - 1]
                try:
                    b0 = predict_bbox(det, propagate_params(a, t0), t0 - det.t, self.intr)
                    b1 = predict_bbox(det, propagate_params(a, t1), t1 - det.t, self.intr)
                    return b0.union(b1)
                except CollisionPassed:
                    pass  # fall back to the detections
        return interpolate_box(boxes, t0).union(interpolate_box(boxes, t1))

    def _window(self, box: BoundingBox, slc: EventSlice) -> PixelRect:
        m = self.cfg.crop_margin + self.cfg.window_border
        return PixelRect.covering(box.x_min - m, box.y_min - m, box.x_max + m, box.y_max + m,
                                  slc.width, slc.height)

    def _diag(self, t, stage, exc):
        self.diagnostics.append(Diagnostic(t, stage, f"{type(exc).__name__}: {exc}"))
        log.warning("t=%.4f %s failed: %s", t, stage, exc)

    def _surface(self, sub: EventSlice, box: BoundingBox, duration: float):
        cfg = self.cfg
        t_ref = median_reference_time(sub)
        lts = render_lts(sub, t_ref, self._window(box, sub))
        sigma_r = cfg.range_sigma if cfg.range_sigma is not None else duration / 2
        smooth = smooth_bilateral(lts, cfg.spatial_sigma, sigma_r)
        surface = fill_unoccupied(smooth) if cfg.fill_unoccupied else smooth
        sampled = robust_sample(surface, sub, self.intr, cfg.g1_min, cfg.g2_max)
        return t_ref, smooth, surface, sampled

    def _lm(self, sampled, surface, a0):
        cfg = self.cfg
        lm_cfg = cfg.lm
        if lm_cfg.max_out_of_window != cfg.max_out_of_window:
            lm_cfg = LmConfig(**{**lm_cfg.__dict__, "max_out_of_window": cfg.max_out_of_window})
        return lm_refine(sampled, surface, self.intr, a0, lm_cfg)

    def _initialise(self, sub, surface, sampled, t_ref):
        cfg = self.cfg
        # centres span the whole crop; the gradient-filtered subset tends to
        # collapse onto a few edges and leaves the system poorly conditioned
        stride = max(1, int(math.ceil(len(sub) / cfg.max_flow_centers)))
        centers = np.arange(0, len(sub), stride)
        nf = estimate_normal_flow(sub, self.intr, cfg.normal_flow, centers)
        init = ransac_fit(nf, t_ref, cfg.ransac)
        return self._lm(sampled, surface, init.params)

    def _needs_reset(self, res, smooth) -> bool:
        vals = smooth.occupied_values()
        ceiling = self.cfg.rms_reset_factor * (float(np.std(vals)) if len(vals) else 0.0)
        return res.rms > ceiling or res.out_of_window > self.cfg.max_out_of_window

    # -- main loop -------------------------------------------------------

    def run(self, events: EventSlice, boxes: Sequence[BoundingBox]) -> Iterator[TtcEstimate]:
        cfg = self.cfg
        if len(events) == 0 or not boxes:
            return
        boxes = sorted(boxes, key=lambda b: b.t)
        t_end = float(events.t_us[-1]) / 1e6
        t = max(float(events.t_us[0]) / 1e6, boxes[0].t)
        a: AffineParams | None = None
        last_t_ref = -math.inf

        while t < t_end:
            if a is None:
                duration = cfg.max_slice_duration
            else:
                try:
                    duration = next_render_interval(propagate_params(a, t), cfg)
                except CollisionPassed as exc:
                    self._diag(t, "schedule", exc)
                    a, duration = None, cfg.max_slice_duration
            t1 = t + duration
            if t1 > t_end:
                break  # a truncated tail slice would bias the median reference time
            box = self._box_for(boxes, t, t1, a)
            sub = crop_to_volume(events, box, t, t1, cfg.crop_margin)
            if len(sub) < cfg.min_events and duration < cfg.max_slice_duration:
                t1 = min(t + cfg.max_slice_duration, t_end)
                box = self._box_for(boxes, t, t1, a)
                sub = crop_to_volume(events, box, t, t1, cfg.crop_margin)
                duration = cfg.max_slice_duration
            if len(sub) < cfg.min_events:
                log.debug("t=%.4f: %d events, idling", t, len(sub))
                t = t1
                continue

            t_ref, smooth, surface, sampled = self._surface(sub, box, duration)
            if t_ref <= last_t_ref:
                t = t1
                continue
            res, stage = None, "refine"
            if a is not None and cfg.warm_start:
                try:
                    res = self._lm(sampled, surface, propagate_params(a, t_ref))
                    if self._needs_reset(res, smooth):
                        self._diag(t_ref, "refine", RuntimeError(f"reset: rms {res.rms:.3g}"))
                        res = None
                except (SolverError, CollisionPassed, ValueError) as exc:
                    self._diag(t_ref, "refine", exc)
                    res = None
            if res is None:
                stage = "init"
                try:
                    res = self._initialise(sub, surface, sampled, t_ref)
                except (SolverError, ValueError) as exc:
                    self._diag(t_ref, "init", exc)
                    a = None
                    t = t1
                    continue

            a = res.params
            last_t_ref = t_ref
            self.slices.append(SliceRecord(t, t1, box, stage))
            yield TtcEstimate(
                t_ref=t_ref, ttc=ttc_from_params(a, cfg.min_az), params=a,
                n_events=len(sub), n_inliers=len(res.inliers), rms=res.rms, stage=stage,
                lm_iterations=res.iterations, lm_stop=res.stop_reason,
            )
            t = t1


def run_pipeline(events: EventSlice, boxes: Sequence[BoundingBox], intr: CameraIntrinsics,
                 cfg: PipelineConfig | None = None) -> Iterator[TtcEstimate]:
    return TtcPipeline(intr, cfg).run(events, boxes)
