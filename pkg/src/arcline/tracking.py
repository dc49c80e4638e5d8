"""Transducer rotation that brings a detected, possibly out-of-plane PM in-plane."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import Line3, PmObservation, RigidTransform, TrusGeometry, pm_position
from .registration import DEFAULT_THETA_BOUND_RAD

GRID_POINTS = 241


class TrackingError(RuntimeError):
    def __init__(self, message, delta_theta_rad, lambda_mm, residual_mm):
        super().__init__(message)
        self.delta_theta_rad = delta_theta_rad
        self.lambda_mm = lambda_mm
        self.residual_mm = residual_mm


@dataclass(frozen=True, eq=False)
class TrackingQuery:
    f_reg: RigidTransform
    laser_line: Line3
    obs: PmObservation
    geometry: TrusGeometry = TrusGeometry()
    theta_bound_rad: float = DEFAULT_THETA_BOUND_RAD

    def __post_init__(self):
        if not self.theta_bound_rad > 0:
            raise ValueError("theta_bound_rad must be > 0")


def _profile(q: TrackingQuery):
    """Distance from the arc point at deviation ``dt`` to the mapped beam ray, and the ray depth."""
    line = q.laser_line.transformed(q.f_reg)
    o, n = line.origin, line.direction

    def dist(dt):
        p = pm_position(q.geometry, q.obs, dt)
        lam = max(0.0, float((p - o) @ n))
        return float(np.linalg.norm(o + lam * n - p)), lam

    return dist


def track(q: TrackingQuery) -> tuple[float, float, float]:
    """Jointly best ``(lambda >= 0, theta')`` for one pair with the registration frozen.

    The depth along the beam has a closed form for any arc angle, which
    leaves a 1-D problem over the angle window: coarse grid, then bounded
    Brent refinement around the best grid cell. Returns
    ``(delta_theta, lambda, residual)`` with ``delta_theta = theta* - theta``.
    """
    dist = _profile(q)
    b = q.theta_bound_rad
    grid = np.linspace(-b, b, GRID_POINTS)
    vals = np.array([dist(t)[0] for t in grid])
    k = int(np.argmin(vals))  # first minimum: ties go to the smaller angle
    step = grid[1] - grid[0]
    lo, hi = max(-b, grid[k] - step), min(b, grid[k] + step)
    best_t, best_v = grid[k], vals[k]
    res = minimize_scalar(lambda t: dist(t)[0], bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12, "maxiter": 500})
    if res.success and res.fun < best_v:
        best_t, best_v = float(res.x), float(res.fun)
    # the window edges are not sampled by the bounded method
    for edge in (lo, hi):
        v = dist(edge)[0]
        if v < best_v:
            best_t, best_v = edge, v
    best_v, lam = dist(best_t)
    if not (math.isfinite(best_t) and math.isfinite(best_v)):
        raise TrackingError("tracking optimizer stalled", best_t, lam, best_v)
    return float(best_t), float(lam), float(best_v)


def plane_deviation_mm(angle_error_rad: float, depth_mm: float) -> float:
    """Arc length swept at ``depth_mm`` by an angular tracking error."""
    if not depth_mm > 0:
        raise ValueError("depth_mm must be > 0")
    return depth_mm * angle_error_rad
