"""Pivot-style laser calibration: recover the beam line in the marker frame.

Pose convention: ``F_MC`` maps camera coordinates into the marker frame, so
``p_marker = F_MC.apply(p_camera)``. Anything that needs marker -> camera
uses ``F_MC.inverse()``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Line3, RigidTransform

log = logging.getLogger(__name__)

MIN_POSES = 3
RECOMMENDED_POSES = 5
MIN_POSE_ANGLE_RAD = np.deg2rad(0.5)


class DegeneratePointSet(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CalibrationInput:
    marker_poses: list[RigidTransform]  # F_MC^i, camera -> marker
    spot_camera: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "marker_poses", list(self.marker_poses))
        object.__setattr__(self, "spot_camera", np.asarray(self.spot_camera, dtype=float).reshape(3))

    def validate(self) -> None:
        """Raise if there are too few poses or two poses share an orientation."""
        n = len(self.marker_poses)
        if n < MIN_POSES:
            raise ValueError(f"calibration needs at least {MIN_POSES} poses, got {n}")
        for (i, a), (j, b) in itertools.combinations(enumerate(self.marker_poses), 2):
            if a.rotation_angle_to(b) < MIN_POSE_ANGLE_RAD:
                raise ValueError(f"poses {i} and {j} differ by less than 0.5 deg in rotation")


@dataclass(frozen=True, eq=False)
class LaserCalibration:
    line_marker: Line3
    per_point_residuals_mm: np.ndarray

    @property
    def residual_mm(self) -> float:
        return float(np.mean(self.per_point_residuals_mm))


def spot_in_marker_frame(f_mc: RigidTransform, spot_camera) -> np.ndarray:
    return f_mc.apply(np.asarray(spot_camera, dtype=float))


def spots_in_marker_frame(inp: CalibrationInput) -> np.ndarray:
    """Map the fixed camera-frame spot into each pose's marker frame, shape (N_s, 3)."""
    if len(inp.marker_poses) < MIN_POSES:
        raise ValueError(f"calibration needs at least {MIN_POSES} poses, got {len(inp.marker_poses)}")
    return np.array([spot_in_marker_frame(f, inp.spot_camera) for f in inp.marker_poses])


def fit_line_svd(points) -> tuple[Line3, float]:
    """Total-least-squares line through ``points``.

    Returns the line (origin at the centroid) and the mean orthogonal
    point-to-line distance. The direction sign is chosen so that it points
    from the first sample towards the last one; if those coincide along the
    line, positive z wins.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise ValueError("need at least two 3-D points")
    if np.max(np.linalg.norm(pts - pts[0], axis=1)) <= 1e-9:
        raise DegeneratePointSet("degenerate point set")
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid)
    direction = vt[0]

    along = float((pts[-1] - pts[0]) @ direction)
    if abs(along) <= 1e-12:
        along = direction[2]
    if along < 0:
        direction = -direction
    line = Line3(centroid, direction)
    return line, float(np.mean(line.distance_to(pts)))


def calibrate(inp: CalibrationInput) -> LaserCalibration:
    inp.validate()
    if len(inp.marker_poses) < RECOMMENDED_POSES:
        log.warning("only %d calibration poses; at least %d recommended",
                    len(inp.marker_poses), RECOMMENDED_POSES)
    pts = spots_in_marker_frame(inp)
    fitted, _ = fit_line_svd(pts)
    # snap the origin to the first sample's foot point on the fitted line
    origin = fitted.origin + ((pts[0] - fitted.origin) @ fitted.direction) * fitted.direction
    line = Line3(origin, fitted.direction)
    return LaserCalibration(line, line.distance_to(pts))


def laser_line_in_camera(calib: LaserCalibration, marker_to_camera: RigidTransform) -> Line3:
    """Beam line in the camera frame given the marker pose as seen by the camera.

    ``marker_to_camera`` is ``F_MC.inverse()``; see :func:`laser_line_from_fmc`.
    """
    return calib.line_marker.transformed(marker_to_camera)


def laser_line_from_fmc(calib: LaserCalibration, f_mc: RigidTransform) -> Line3:
    return laser_line_in_camera(calib, f_mc.inverse())
