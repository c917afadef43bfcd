"""Robust linear initialisation of the affine parameters from normal flow.

Each normal-flow measurement ``n`` at normalized position ``p`` and time
``t`` gives one linear equation in ``a = nu / Z(t_ref)``::

    [n_x, n_y, (dt * n - p) . n] . a = -(n . n),   dt = t_ref - t

because the true full flow ``u`` satisfies ``u . n = n . n``. Three such rows
determine ``a``; RANSAC over minimal samples supplies robustness.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .normal_flow import NormalFlowField, NormalFlowMeasurement

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class ZeroNormalFlow(SolverError):
    pass


class SingularSystem(SolverError):
    pass


class RankDeficient(SolverError):
    pass


class NoConsensus(SolverError):
    pass


@dataclass(frozen=True)
class AffineParams:
    a_x: float
    a_y: float
    a_z: float
    t_ref: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.a_x, self.a_y, self.a_z)):
            raise ValueError(f"non-finite affine parameters {self}")

    @classmethod
    def from_vector(cls, a, t_ref: float = 0.0) -> "AffineParams":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(t_ref))

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.a_x, self.a_y, self.a_z])


@dataclass(frozen=True)
class MeasurementRow:
    row: np.ndarray
    rhs: float
    index: int = -1


@dataclass
class RansacConfig:
    max_iters: int = 300
    target_inlier_ratio: float = 0.9
    inlier_threshold: float = 0.3
    rng_seed: int = 0
    min_angle_deg: float = 10.0
    refine_passes: int = 3
    trim_sigmas: float = 3.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.target_inlier_ratio <= 1:
            raise ValueError("target_inlier_ratio must be in (0, 1]")


@dataclass(frozen=True, eq=False)
class FitResult:
    params: AffineParams
    inliers: np.ndarray
    rms: float
    iterations: int
    converged: bool = True
    history: tuple = field(default=())


# ---------------------------------------------------------------------------
# rows

def build_row(m: NormalFlowMeasurement, t_ref: float, index: int = -1) -> MeasurementRow:
    n = np.asarray(m.n, dtype=np.float64)
    nn = float(n @ n)
    if not nn > 0:
        raise ZeroNormalFlow("normal flow has zero magnitude")
    dt = t_ref - m.t
    p = np.asarray(m.p, dtype=np.float64)
    return MeasurementRow(np.array([n[0], n[1], float((dt * n - p) @ n)]), -nn, index)


def build_system(ms: NormalFlowField, t_ref: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``build_row`` over a whole field: returns (rows (N, 3), rhs (N,))."""
    n, p = ms.n, ms.p
    nn = np.einsum("ij,ij->i", n, n)
    if np.any(~(nn > 0)):
        raise ZeroNormalFlow("normal flow has zero magnitude")
    dt = (t_ref - ms.t)[:, None]
    third = np.einsum("ij,ij->i", dt * n - p, n)
    return np.column_stack([n, third]), -nn


def _as_arrays(rows) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(rows, tuple) and len(rows) == 2 and isinstance(rows[0], np.ndarray):
        return rows
    rows = list(rows)
    return np.array([r.row for r in rows]).reshape(-1, 3), np.array([r.rhs for r in rows], dtype=np.float64)


# ---------------------------------------------------------------------------
# solvers

def solve_minimal(rows, t_ref: float = 0.0) -> AffineParams:
    A, b = _as_arrays(rows)
    if A.shape != (3, 3):
        raise ValueError("minimal solver needs exactly three rows")
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e12:
        raise SingularSystem("minimal system is singular")
    return AffineParams.from_vector(np.linalg.solve(A, b), t_ref)


def solve_least_squares(rows, t_ref: float = 0.0) -> AffineParams:
    """Orthogonal-factorisation least squares of the stacked rows."""
    A, b = _as_arrays(rows)
    if A.shape[0] < 3:
        raise RankDeficient("need at least three rows")
    a, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    if rank < 3 or sv[-1] <= sv[0] * 1e-12:
        raise RankDeficient(f"system has rank {rank}")
    return AffineParams.from_vector(a, t_ref)


def solve_naive_full_flow(ms: NormalFlowField, t_ref: float = 0.0) -> AffineParams:
    """Baseline that treats each normal flow as if it were the full flow.

    Stacks ``-a_x + x a_z = n_x`` and ``-a_y + y a_z = n_y``; biased whenever
    the gradient direction is not parallel to the true flow.
    """
    x, y = ms.p[:, 0], ms.p[:, 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    A = np.concatenate([np.column_stack([-one, zero, x]), np.column_stack([zero, -one, y])])
    b = np.concatenate([ms.n[:, 0], ms.n[:, 1]])
    a, *_ = np.linalg.lstsq(A, b, rcond=None)
    return AffineParams.from_vector(a, t_ref)


def normalized_residuals(A: np.ndarray, b: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``|row . a - rhs| / (n . n)``; ``-rhs`` is ``n . n``."""
    return np.abs(A @ a - b) / -b


def _angular_spread_ok(n3: np.ndarray, min_angle: float) -> bool:
    ang = np.arctan2(n3[:, 1], n3[:, 0])
    d = np.abs(ang[:, None] - ang[None, :]) % np.pi
    d = np.minimum(d, np.pi - d)  # directions as lines
    return bool(d.max() >= min_angle)


def ransac_fit(ms: NormalFlowField, t_ref: float, cfg: RansacConfig | None = None) -> FitResult:
    cfg = cfg or RansacConfig()
    A, b = build_system(ms, t_ref)
    n_meas = len(b)
    if n_meas < 3:
        raise NoConsensus("fewer than three measurements")
    rng = np.random.default_rng(cfg.rng_seed)
    min_angle = math.radians(cfg.min_angle_deg)
    target = math.ceil(cfg.target_inlier_ratio * n_meas)

    best_inl = np.zeros(0, dtype=np.int64)
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        sample = rng.choice(n_meas, size=3, replace=False)
        if not _angular_spread_ok(ms.n[sample], min_angle):
            continue
        try:
            a = solve_minimal((A[sample], b[sample]), t_ref).vector
        except SingularSystem:
            continue
        inl = np.nonzero(normalized_residuals(A, b, a) <= cfg.inlier_threshold)[0]
        if len(inl) > len(best_inl):
            best_inl = inl
            if len(inl) >= target:
                break

    if len(best_inl) < 3 or len(best_inl) < 0.1 * n_meas:
        raise NoConsensus(f"best consensus {len(best_inl)} of {n_meas}")
    try:
        params = solve_least_squares((A[best_inl], b[best_inl]), t_ref)
    except RankDeficient as exc:
        raise NoConsensus(str(exc)) from None
    # Gross outliers can land under the threshold by chance and pull the
    # refit. Trim residuals beyond a robust scale of the consensus set
    # (residuals are absolute values centred on zero, so the median suffices).
    for _ in range(cfg.refine_passes):
        res = normalized_residuals(A[best_inl], b[best_inl], params.vector)
        sigma = 1.4826 * np.median(res)
        keep = best_inl[res <= max(cfg.trim_sigmas * sigma, 1e-9)]
        if len(keep) == len(best_inl) or len(keep) < max(3, len(best_inl) // 2):
            break
        try:
            params = solve_least_squares((A[keep], b[keep]), t_ref)
        except RankDeficient:
            break
        best_inl = keep
    res = normalized_residuals(A[best_inl], b[best_inl], params.vector)
    log.debug("ransac: %d/%d inliers after %d iterations", len(best_inl), n_meas, iters)
    return FitResult(params, best_inl, float(np.sqrt(np.mean(res**2))), iters)


# ---------------------------------------------------------------------------
# TTC

@dataclass(frozen=True)
class TTC:
    """Time to collision and its regime: 'approach', 'diverging' or 'receding'."""

    seconds: float
    regime: str = "approach"

    @property
    def signed(self) -> float:
        """Value as written to CSV: inf when diverging, negative when receding."""
        if self.regime == "diverging":
            return math.inf
        if self.regime == "receding":
            return -self.seconds
        return self.seconds


def ttc_from_params(a: AffineParams, min_az: float = 1e-3) -> TTC:
    if a.a_z > min_az:
        return TTC(1.0 / a.a_z)
    if a.a_z < -min_az:
        return TTC(1.0 / abs(a.a_z), "receding")
    return TTC(math.inf, "diverging")
