"""Spatio-temporal registration: warp events to the reference time with the
time-variant affine model and refine ``a`` by Levenberg-Marquardt on the
smoothed LTS.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .events import CameraIntrinsics
from .linear_solver import AffineParams, FitResult, SolverError
from .lts import LinearTimeSurface, OutOfWindow, SampledEventSet, sample_many

log = logging.getLogger(__name__)


class InsufficientEvents(SolverError):
    pass


class DivergedOutOfWindow(SolverError):
    pass


def _vec(a) -> np.ndarray:
    return a.vector if isinstance(a, AffineParams) else np.asarray(a, dtype=np.float64)


def affine_flow(p, a) -> np.ndarray:
    """``A(p; a) = [-a_x + x a_z, -a_y + y a_z]`` for p of shape (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    a = _vec(a)
    return np.stack([-a[0] + p[..., 0] * a[2], -a[1] + p[..., 1] * a[2]], axis=-1)


def warp_event(p, t, t_ref: float, a) -> np.ndarray:
    """Time-variant warp of normalized points observed at ``t`` to ``t_ref``.

    With ``a = nu / Z(t_ref)`` this is exact for constant relative velocity.
    """
    dt = np.asarray(t_ref - np.asarray(t, dtype=np.float64))
    return np.asarray(p, dtype=np.float64) + affine_flow(p, a) * dt[..., None]


def warp_event_constant_model(p, t, t_ref: float, a0, t0=None) -> np.ndarray:
    """Constant-flow baseline: each event keeps its instantaneous flow.

    ``a0`` is ``nu / Z(t0)``. The flow of an event at ``t`` uses
    ``nu / Z(t) = a0 / (1 - a0_z (t - t0))`` and is held constant up to
    ``t_ref``; ``t0=None`` anchors at the event's own time.
    """
    a0 = _vec(a0)
    t = np.asarray(t, dtype=np.float64)
    if t0 is None:
        scale = np.ones_like(t)
    else:
        scale = 1.0 / (1.0 - a0[2] * (t - t0))
    flow = affine_flow(p, a0) * scale[..., None]
    return np.asarray(p, dtype=np.float64) + flow * (t_ref - t)[..., None]


@dataclass(frozen=True, eq=False)
class WarpedEvents:
    indices: np.ndarray
    p: np.ndarray  # warped normalized
    px: np.ndarray  # warped pixel


def warp_events(events: SampledEventSet, intr: CameraIntrinsics, t_ref: float, a) -> WarpedEvents:
    q = warp_event(events.p, events.t, t_ref, a)
    px = np.column_stack([q[:, 0] * intr.fx + intr.cx, q[:, 1] * intr.fy + intr.cy])
    return WarpedEvents(events.indices, q, px)


def residuals_and_jacobians(
    events: SampledEventSet, lts: LinearTimeSurface, intr: CameraIntrinsics, a
):
    """LTS value at each warped event and its derivative w.r.t. ``a``.

    Returns ``(r (N,), J (N, 3), valid (N,))``; out-of-window events have
    zero rows and ``valid=False``.
    """
    dt = lts.t_ref - events.t
    w = warp_events(events, intr, lts.t_ref, a)
    r, grad, valid = sample_many(lts, w.px)
    gx = grad[:, 0] * intr.fx
    gy = grad[:, 1] * intr.fy
    x, y = events.p[:, 0], events.p[:, 1]
    J = np.column_stack([-gx, -gy, gx * x + gy * y]) * dt[:, None]
    J[~valid] = 0.0
    return r, J, valid


def residual_and_jacobian(p, t: float, lts: LinearTimeSurface, intr: CameraIntrinsics, a):
    """Single-event form of :func:`residuals_and_jacobians`."""
    ev = SampledEventSet(np.zeros(1, dtype=np.int64), np.full((1, 2), np.nan),
                         np.asarray(p, dtype=np.float64).reshape(1, 2), np.array([float(t)]))
    r, J, valid = residuals_and_jacobians(ev, lts, intr, a)
    if not valid[0]:
        raise OutOfWindow("warped event falls outside the LTS window")
    return float(r[0]), J[0]


@dataclass
class LmConfig:
    max_iters: int = 10
    initial_damping: float | None = None  # None: 1e-3 * trace(J^T J) / 3
    damping_up: float = 10.0
    damping_down: float = 10.0
    step_tol: float = 1e-4  # relative to |a|
    residual_tol: float = 1e-10  # relative decrease of the mean squared residual
    min_events: int = 10
    max_out_of_window: float = 0.5

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True, eq=False)
class LmResult(FitResult):
    stop_reason: str = "max_iters"
    out_of_window: float = 0.0


def lm_refine(
    events: SampledEventSet,
    lts: LinearTimeSurface,
    intr: CameraIntrinsics,
    a_init,
    cfg: LmConfig | None = None,
) -> LmResult:
    """Minimise the mean squared LTS value at the warped events.

    The mean (rather than the sum) over in-window events keeps the objective
    comparable when an event crosses the window border between iterations.
    """
    cfg = cfg or LmConfig()
    t_ref = lts.t_ref
    n_total = len(events)

    def evaluate(a):
        r, J, valid = residuals_and_jacobians(events, lts, intr, a)
        n_valid = int(valid.sum())
        oow = 1.0 - n_valid / n_total if n_total else 1.0
        if oow > cfg.max_out_of_window:
            raise DivergedOutOfWindow(f"{oow:.0%} of events warped outside the window")
        return r[valid], J[valid], valid, oow

    if n_total < cfg.min_events:
        raise InsufficientEvents(f"{n_total} events, need {cfg.min_events}")
    a = _vec(a_init).copy()
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite initial parameters")
    r, J, valid, oow = evaluate(a)
    if len(r) < cfg.min_events:
        raise InsufficientEvents(f"only {len(r)} events warp inside the window")
    cost = float(np.mean(r * r))
    H = J.T @ J
    lam = cfg.initial_damping if cfg.initial_damping is not None else 1e-3 * np.trace(H) / 3
    lam = max(lam, 1e-300)
    history = [cost]
    stop = "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        g = J.T @ r
        delta = np.linalg.solve(H + lam * np.eye(3), -g)
        if np.linalg.norm(delta) <= cfg.step_tol * (np.linalg.norm(a) + cfg.step_tol):
            stop = "step"
            break
        a_new = a + delta
        try:
            r_new, J_new, valid_new, oow_new = evaluate(a_new)
            cost_new = float(np.mean(r_new * r_new)) if len(r_new) else np.inf
        except DivergedOutOfWindow:
            cost_new = np.inf
        if cost_new < cost:
            rel = (cost - cost_new) / cost if cost > 0 else 0.0
            a, r, J, valid, oow, cost = a_new, r_new, J_new, valid_new, oow_new, cost_new
            H = J.T @ J
            lam /= cfg.damping_down
            history.append(cost)
            if rel < cfg.residual_tol:
                stop = "residual"
                break
        else:
            lam *= cfg.damping_up
    log.debug("lm: %d iterations, stop=%s, rms=%.3g", it, stop, np.sqrt(cost))
    return LmResult(
        params=AffineParams.from_vector(a, t_ref),
        inliers=events.indices[valid],
        rms=float(np.sqrt(cost)),
        iterations=it,
        converged=stop != "max_iters",
        history=tuple(history),
        stop_reason=stop,
        out_of_window=oow,
    )
