from __future__ import annotations

import functools

import numpy as np
import pytest

from ettc.events import CameraIntrinsics
from ettc.simulator import approach_scenario, generate_events


@pytest.fixture
def intr():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=319.5, cy=239.5, width=640, height=480)


@functools.lru_cache(maxsize=None)
def approach(seed: int = 0, outlier_fraction: float = 0.0):
    """Cached (scene, events, ground truth) for the car-approach simulator."""
    scene = approach_scenario(seed, outlier_fraction=outlier_fraction)
    slc, gt = generate_events(scene)
    return scene, slc, gt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# lines written by tests/test_acceptance.py, echoed after the test run
ACCEPTANCE: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str, seconds: float) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail} ({seconds:.1f} s)"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
