from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ettc.events import (
    BoundingBox, CameraIntrinsics, Event, EventSlice, MalformedLine, NonMonotoneTimestamps,
    crop_to_volume, normalized_to_pixel, parse_event_file, pixel_to_normalized, read_boxes,
    read_intrinsics, write_boxes, write_event_file, write_intrinsics,
)


def test_parse_two_events():
    slc = parse_event_file(io.StringIO("1000 10 20 1\n1500 11 20 0"))
    assert len(slc) == 2
    assert list(slc.p) == [1, -1]
    np.testing.assert_allclose(slc.t, [1e-3, 1.5e-3])
    assert slc[0] == Event(10, 20, 1000, 1)


def test_parse_empty():
    slc = parse_event_file(io.StringIO(""))
    assert len(slc) == 0
    assert slc.t_begin == slc.t_end == 0.0


@pytest.mark.parametrize("text, line", [
    ("abc", 1),
    ("1000 1 2 1\n1001 1 2", 2),
    ("1000 1 2 1\n1001 1 2 3", 2),
    ("1000 1 2 1\n\n-5 1 2 1", 3),
    ("1000 1.5 2 1", 1),
])
def test_malformed_line_number(text, line):
    with pytest.raises(MalformedLine) as exc:
        parse_event_file(io.StringIO(text))
    assert exc.value.line_no == line


def test_pixel_outside_sensor_is_malformed():
    with pytest.raises(MalformedLine):
        parse_event_file(io.StringIO("10 700 2 1"), width=640, height=480)


def test_reorder_buffer():
    # small local disorder is sorted silently, large jumps are rejected
    lines = [f"{t} 1 1 1" for t in (3, 1, 2, 4)]
    assert list(parse_event_file(io.StringIO("\n".join(lines))).t_us) == [1, 2, 3, 4]
    late = [f"{t} 1 1 1" for t in range(1, 30)] + ["0 1 1 1"]
    with pytest.raises(NonMonotoneTimestamps):
        parse_event_file(io.StringIO("\n".join(late)), reorder_buffer=10)
    parse_event_file(io.StringIO("\n".join(late)), reorder_buffer=100)


def test_parse_bytes_and_path(tmp_path):
    raw = b"5 1 2 1\n6 3 4 0\n"
    assert len(parse_event_file(io.BytesIO(raw))) == 2
    f = tmp_path / "ev.txt"
    f.write_bytes(raw)
    assert list(parse_event_file(f).x) == [1, 3]


events_strategy = st.lists(
    st.tuples(st.integers(0, 10**7), st.integers(0, 639), st.integers(0, 479), st.sampled_from([-1, 1])),
    max_size=60,
)


@settings(max_examples=50, deadline=None)
@given(events_strategy)
def test_parse_serialize_roundtrip(evs):
    evs = sorted(evs, key=lambda e: e[0])
    slc = EventSlice.from_arrays([e[1] for e in evs], [e[2] for e in evs], [e[0] for e in evs],
                                 [e[3] for e in evs])
    buf = io.StringIO()
    write_event_file(slc, buf)
    back = parse_event_file(io.StringIO(buf.getvalue()), 640, 480)
    for col in ("x", "y", "t_us", "p"):
        np.testing.assert_array_equal(getattr(back, col), getattr(slc, col))
    buf2 = io.StringIO()
    write_event_file(back, buf2)
    assert buf2.getvalue() == buf.getvalue()


def test_pixel_normalized_examples():
    intr = CameraIntrinsics(100.0, 100.0, 320.0, 240.0)
    np.testing.assert_array_equal(pixel_to_normalized(intr, [320, 240]), [0, 0])
    np.testing.assert_array_equal(pixel_to_normalized(intr, [420, 240]), [1.0, 0])


@given(st.floats(1, 2000), st.floats(1, 2000), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3),
       st.floats(-5e3, 5e3), st.floats(-5e3, 5e3))
def test_pixel_roundtrip(fx, fy, cx, cy, u, v):
    intr = CameraIntrinsics(fx, fy, cx, cy)
    back = normalized_to_pixel(intr, pixel_to_normalized(intr, [u, v]))
    np.testing.assert_allclose(back, [u, v], rtol=0, atol=1e-12 * max(1.0, abs(u), abs(v), abs(cx), abs(cy)))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0, 0)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, -1.0, 0, 0)


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(0.0, 5, 0, 5, 10)
    with pytest.raises(ValueError):
        BoundingBox(0.0, 0, 3, 10, 2)


def _random_slice(rng, n=100, w=64, h=48, t_max=100_000):
    return EventSlice.from_arrays(rng.integers(0, w, n), rng.integers(0, h, n),
                                  np.sort(rng.integers(0, t_max, n)), rng.choice([-1, 1], n),
                                  width=w, height=h, t_begin=0.0, t_end=t_max / 1e6)


def test_crop_identity_and_empty(rng):
    slc = _random_slice(rng)
    whole = BoundingBox(0.0, 0, 0, slc.width - 1, slc.height - 1)
    out = crop_to_volume(slc, whole, slc.t_begin, slc.t_end, margin=0)
    np.testing.assert_array_equal(out.t_us, slc.t_us)
    far = BoundingBox(0.0, 1000, 1000, 1001, 1001)
    assert len(crop_to_volume(slc, far, slc.t_begin, slc.t_end)) == 0
    with pytest.raises(ValueError):
        crop_to_volume(slc, whole, 0.1, 0.1)


def test_crop_matches_bruteforce(rng):
    slc = _random_slice(rng, n=100)
    box = BoundingBox(0.0, 10.5, 5.0, 40.2, 30.0)
    t0, t1 = 0.02, 0.08
    out = crop_to_volume(slc, box, t0, t1, margin=1.5)
    expect = [e for e in slc
              if t0 <= e.t_s <= t1 and 9.0 <= e.x <= 41.7 and 3.5 <= e.y <= 31.5]
    assert list(out) == expect
    assert out.t_begin == t0 and out.t_end == t1


def test_crop_exact_half():
    # 50 of 100 events placed inside the box by construction
    x = np.r_[np.full(50, 5), np.full(50, 30)]
    slc = EventSlice.from_arrays(x, np.full(100, 5), np.arange(100), np.ones(100), width=40, height=10)
    out = crop_to_volume(slc, BoundingBox(0, 0, 0, 10, 9), 0.0, 1.0, margin=2)
    assert len(out) == 50


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 60), st.floats(0, 40), st.floats(1, 30), st.floats(1, 30),
       st.floats(0, 2))
def test_crop_idempotent(seed, x0, y0, w, h, margin):
    slc = _random_slice(np.random.default_rng(seed))
    box = BoundingBox(0.0, x0, y0, x0 + w, y0 + h)
    once = crop_to_volume(slc, box, 0.01, 0.09, margin)
    twice = crop_to_volume(once, box, 0.01, 0.09, margin)
    np.testing.assert_array_equal(once.t_us, twice.t_us)
    np.testing.assert_array_equal(once.x, twice.x)
    assert np.all(np.diff(once.t_us) >= 0)


def test_slice_invariants(rng):
    slc = _random_slice(rng)
    assert np.all(slc.t >= slc.t_begin) and np.all(slc.t <= slc.t_end)
    with pytest.raises(ValueError):
        EventSlice(np.array([1, 2]), np.array([1, 2]), np.array([5, 3]), np.array([1, 1]))
    with pytest.raises(ValueError):
        slc.x[0] = 3


def test_box_and_intrinsics_files(tmp_path):
    boxes = [BoundingBox(0.05, 1, 2, 3.5, 4, 7), BoundingBox(0.0, 0, 0, 1, 1, 7)]
    write_boxes(boxes, tmp_path / "b.csv")
    back = read_boxes(tmp_path / "b.csv")
    assert [b.t for b in back] == [0.0, 0.05]
    assert back[1] == boxes[0]
    intr = CameraIntrinsics(400.0, 410.0, 300.0, 200.0, 600, 400)
    write_intrinsics(intr, tmp_path / "i.json")
    assert read_intrinsics(tmp_path / "i.json") == intr
