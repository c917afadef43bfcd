"""Time-to-contact estimation from event-camera data and a bounding-box track."""

from __future__ import annotations

from .events import BoundingBox, CameraIntrinsics, Event, EventSlice, parse_event_file
from .linear_solver import TTC, AffineParams, ransac_fit, ttc_from_params
from .pipeline import PipelineConfig, TtcEstimate, TtcPipeline, run_pipeline

__all__ = [
    "AffineParams", "BoundingBox", "CameraIntrinsics", "Event", "EventSlice", "PipelineConfig",
    "TTC", "TtcEstimate", "TtcPipeline", "parse_event_file", "ransac_fit", "run_pipeline",
    "ttc_from_params",
]
__version__ = "0.1.0"
