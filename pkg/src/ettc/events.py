"""Event data model and camera intrinsics, plus the plain-text interchange formats.

Events are held column-wise (structure of arrays) so that every downstream
stage can stay vectorised. Timestamps are 64-bit integer microseconds and are
only turned into floating seconds where the math needs it.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence, Union

import numpy as np

US_PER_S = 1_000_000

PathOrStream = Union[str, Path, IO[str], IO[bytes]]


class EventFormatError(ValueError):
    """Base class for ingestion errors."""


class MalformedLine(EventFormatError):
    def __init__(self, line_no: int, text: str = "", reason: str = ""):
        self.line_no = line_no
        msg = f"malformed event on line {line_no}"
        if reason:
            msg += f" ({reason})"
        if text:
            msg += f": {text!r}"
        super().__init__(msg)


class NonMonotoneTimestamps(EventFormatError):
    def __init__(self, line_no: int, displacement: int):
        self.line_no = line_no
        self.displacement = displacement
        super().__init__(
            f"event on line {line_no} is {displacement} events out of order, "
            "beyond the reorder buffer"
        )


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int  # microseconds
    polarity: int  # +1 / -1

    @property
    def t_s(self) -> float:
        return self.t / US_PER_S


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d.get("width", 640)),
            height=int(d.get("height", 480)),
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


def pixel_to_normalized(intr: CameraIntrinsics, px) -> np.ndarray:
    """Map pixel coordinates (..., 2) to normalized image coordinates."""
    px = np.asarray(px, dtype=np.float64)
    return np.stack(
        [(px[..., 0] - intr.cx) / intr.fx, (px[..., 1] - intr.cy) / intr.fy],
        axis=-1,
    )


def normalized_to_pixel(intr: CameraIntrinsics, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.stack(
        [p[..., 0] * intr.fx + intr.cx, p[..., 1] * intr.fy + intr.cy], axis=-1
    )


@dataclass(frozen=True)
class BoundingBox:
    t: float
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    track_id: int = 0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate bounding box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def corners(self) -> np.ndarray:
        return np.array(
            [
                [self.x_min, self.y_min],
                [self.x_max, self.y_min],
                [self.x_max, self.y_max],
                [self.x_min, self.y_max],
            ]
        )

    def expanded(self, margin: float) -> "BoundingBox":
        return BoundingBox(
            self.t, self.x_min - margin, self.y_min - margin,
            self.x_max + margin, self.y_max + margin, self.track_id,
        )

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            max(self.t, other.t),
            min(self.x_min, other.x_min), min(self.y_min, other.y_min),
            max(self.x_max, other.x_max), max(self.y_max, other.y_max),
            self.track_id,
        )

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0.0, min(self.x_max, other.x_max) - max(self.x_min, other.x_min))
        iy = max(0.0, min(self.y_max, other.y_max) - max(self.y_min, other.y_min))
        inter = ix * iy
        union = self.width * self.height + other.width * other.height - inter
        return inter / union if union > 0 else 0.0


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EventSlice:
    """Time-ordered batch of events plus the volume it was cut from.

    ``t_begin``/``t_end`` are seconds; every event timestamp lies inside.
    """

    x: np.ndarray
    y: np.ndarray
    t_us: np.ndarray
    p: np.ndarray
    t_begin: float = 0.0
    t_end: float = 0.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        n = len(self.t_us)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns differ in length")
        object.__setattr__(self, "x", _frozen(self.x, np.int32))
        object.__setattr__(self, "y", _frozen(self.y, np.int32))
        object.__setattr__(self, "t_us", _frozen(self.t_us, np.int64))
        object.__setattr__(self, "p", _frozen(self.p, np.int8))
        if n and np.any(np.diff(self.t_us) < 0):
            raise ValueError("events must be sorted by timestamp")

    @classmethod
    def from_arrays(cls, x, y, t_us, p, width=640, height=480,
                    t_begin=None, t_end=None) -> "EventSlice":
        t_us = np.asarray(t_us, dtype=np.int64)
        order = np.argsort(t_us, kind="stable")
        t_sorted = t_us[order]
        if t_begin is None:
            t_begin = t_sorted[0] / US_PER_S if len(t_sorted) else 0.0
        if t_end is None:
            t_end = t_sorted[-1] / US_PER_S if len(t_sorted) else 0.0
        return cls(
            x=np.asarray(x)[order], y=np.asarray(y)[order], t_us=t_sorted,
            p=np.asarray(p)[order], t_begin=float(t_begin), t_end=float(t_end),
            width=int(width), height=int(height),
        )

    @classmethod
    def from_events(cls, events: Iterable[Event], width=640, height=480) -> "EventSlice":
        ev = list(events)
        return cls.from_arrays(
            [e.x for e in ev], [e.y for e in ev], [e.t for e in ev],
            [e.polarity for e in ev], width=width, height=height,
        )

    @classmethod
    def empty(cls, width=640, height=480) -> "EventSlice":
        z = np.zeros(0)
        return cls(z, z, z, z, 0.0, 0.0, width, height)

    def __len__(self) -> int:
        return len(self.t_us)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t_us[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def t(self) -> np.ndarray:
        """Timestamps in seconds."""
        return self.t_us / US_PER_S

    @property
    def duration(self) -> float:
        return self.t_end - self.t_begin

    def pixels(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=-1).astype(np.float64)

    def normalized(self, intr: CameraIntrinsics) -> np.ndarray:
        return pixel_to_normalized(intr, self.pixels())

    def select(self, mask_or_index, t_begin=None, t_end=None) -> "EventSlice":
        return EventSlice(
            self.x[mask_or_index], self.y[mask_or_index],
            self.t_us[mask_or_index], self.p[mask_or_index],
            self.t_begin if t_begin is None else float(t_begin),
            self.t_end if t_end is None else float(t_end),
            self.width, self.height,
        )

    def time_range(self, t0: float, t1: float) -> "EventSlice":
        """Events with t in [t0, t1] seconds, found by bisection."""
        lo, hi = _us_bounds(t0, t1)
        i0 = int(np.searchsorted(self.t_us, lo, side="left"))
        i1 = int(np.searchsorted(self.t_us, hi, side="right"))
        return self.select(slice(i0, i1), t0, t1)


def _us_bounds(t0: float, t1: float) -> tuple[int, int]:
    # integer bounds so that a timestamp exactly on t0/t1 is never lost to rounding
    return math.ceil(t0 * US_PER_S - 1e-6), math.floor(t1 * US_PER_S + 1e-6)


def crop_to_volume(
    slc: EventSlice, box: BoundingBox, t0: float, t1: float, margin: float = 2.0
) -> EventSlice:
    """Events inside ``box`` grown by ``margin`` pixels and within [t0, t1]."""
    if not t0 < t1:
        raise ValueError("t0 must be < t1")
    sub = slc.time_range(t0, t1)
    b = box.expanded(margin)
    inside = (sub.x >= b.x_min) & (sub.x <= b.x_max) & (sub.y >= b.y_min) & (sub.y <= b.y_max)
    return sub.select(inside)


# ---------------------------------------------------------------------------
# text formats

def _open_text(source: PathOrStream) -> tuple[IO[str], bool]:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="ascii", newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="ascii", newline=""), False


def parse_event_file(
    source: PathOrStream,
    width: int | None = None,
    height: int | None = None,
    reorder_buffer: int = 1000,
) -> EventSlice:
    """Read ``t_us x y p`` lines (p in {0, 1}; 0 is negative polarity).

    Blank lines are skipped. Slightly out-of-order timestamps are re-sorted as
    long as no event sits more than ``reorder_buffer`` positions from its
    sorted place.
    """
    fh, owned = _open_text(source)
    ts, xs, ys, ps, line_nos = [], [], [], [], []
    try:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise MalformedLine(line_no, line, "expected 4 fields")
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise MalformedLine(line_no, line, "non-integer field") from None
            if t < 0 or x < 0 or y < 0 or p not in (0, 1):
                raise MalformedLine(line_no, line, "value out of range")
            if (width is not None and x >= width) or (height is not None and y >= height):
                raise MalformedLine(line_no, line, "pixel outside sensor")
            ts.append(t); xs.append(x); ys.append(y); ps.append(1 if p else -1)
            line_nos.append(line_no)
    finally:
        if owned:
            fh.close()

    w = width if width is not None else (max(xs) + 1 if xs else 640)
    h = height if height is not None else (max(ys) + 1 if ys else 480)
    if not ts:
        return EventSlice.empty(w, h)

    t_arr = np.asarray(ts, dtype=np.int64)
    order = np.argsort(t_arr, kind="stable")
    displacement = np.abs(order - np.arange(len(order)))
    worst = int(np.argmax(displacement))
    if displacement[worst] > reorder_buffer:
        raise NonMonotoneTimestamps(line_nos[order[worst]], int(displacement[worst]))
    return EventSlice.from_arrays(xs, ys, t_arr, ps, width=w, height=h)


def write_event_file(slc: EventSlice, dest: PathOrStream) -> None:
    lines = [
        f"{t} {x} {y} {1 if p > 0 else 0}\n"
        for t, x, y, p in zip(slc.t_us.tolist(), slc.x.tolist(), slc.y.tolist(), slc.p.tolist())
    ]
    text = "".join(lines)
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text, encoding="ascii")
    elif isinstance(dest, io.TextIOBase):
        dest.write(text)
    else:
        dest.write(text.encode("ascii"))


BOX_FIELDS = ["t_s", "x_min", "y_min", "x_max", "y_max", "track_id"]


def read_boxes(path: str | Path) -> list[BoundingBox]:
    boxes = []
    with open(path, newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip() == "t_s":
                continue
            try:
                t, x0, y0, x1, y1 = (float(v) for v in row[:5])
                tid = int(row[5]) if len(row) > 5 else 0
                boxes.append(BoundingBox(t, x0, y0, x1, y1, tid))
            except (ValueError, IndexError) as exc:
                raise EventFormatError(f"bad bounding box on line {row_no}: {exc}") from None
    boxes.sort(key=lambda b: b.t)
    return boxes


def write_boxes(boxes: Sequence[BoundingBox], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOX_FIELDS)
        for b in boxes:
            w.writerow([repr(b.t), repr(b.x_min), repr(b.y_min), repr(b.x_max), repr(b.y_max), b.track_id])


def read_intrinsics(path: str | Path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


def write_intrinsics(intr: CameraIntrinsics, path: str | Path) -> None:
    Path(path).write_text(json.dumps(intr.to_dict(), indent=2) + "\n")
