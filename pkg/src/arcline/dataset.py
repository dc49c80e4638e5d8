"""Dataset files: one JSON document per acquisition session.

Layout (``"schema": "arcline/1"``)::

    {
      "schema": "arcline/1",
      "units": {"length": "mm", "angle": "deg"},
      "description": "...",
      "seed": 7,
      "geometry": {"n_elements": 128, "pitch_mm": 0.3, "radius_mm": 10.0},
      "marker_poses": [[16 numbers, row-major F_MC, camera -> marker], ...],
      "observations": [{"scan_angle_deg": .., "lateral_mm": .., "radius_mm": ..}, ...],
      "calibration": {"origin_mm": [..], "direction": [..], "residuals_mm": [..]},   # optional
      "calibration_input": {"spot_camera_mm": [..], "marker_poses": [[16], ...]},     # optional
      "truth": {"f_reg": [16], "delta_theta_deg": [..]}                               # optional
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibrationInput, LaserCalibration, laser_line_from_fmc
from .geometry import Line3, PmObservation, RigidTransform, TrusGeometry

SCHEMA = "arcline/1"
UNITS = {"length": "mm", "angle": "deg"}


class DatasetError(ValueError):
    pass


def _deg(rad: float, hint: float | None = None) -> float:
    # keep the file's own degree value when it still maps to the same radians
    if hint is not None and math.radians(hint) == rad:
        return hint
    return math.degrees(rad)


@dataclass(eq=False)
class Dataset:
    marker_poses: list[RigidTransform]
    observations: list[PmObservation]
    geometry: TrusGeometry = field(default_factory=TrusGeometry)
    calibration: LaserCalibration | None = None
    calibration_input: CalibrationInput | None = None
    description: str = ""
    seed: int | None = None
    truth_f_reg: RigidTransform | None = None
    truth_delta_theta_rad: list[float] | None = None
    _deg_hints: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.marker_poses) != len(self.observations):
            raise DatasetError(
                f"{len(self.marker_poses)} marker poses but {len(self.observations)} observations")

    def __len__(self) -> int:
        return len(self.observations)

    def pairs(self, idx=None) -> list[tuple[Line3, PmObservation]]:
        if self.calibration is None:
            raise DatasetError("dataset has no laser calibration; run `calibrate` first")
        idx = range(len(self)) if idx is None else idx
        return [(laser_line_from_fmc(self.calibration, self.marker_poses[i]), self.observations[i])
                for i in idx]

    def to_dict(self) -> dict:
        hints = self._deg_hints
        scan_hints = hints.get("scan", [None] * len(self))
        d = {
            "schema": SCHEMA,
            "units": dict(UNITS),
            "description": self.description,
            "seed": self.seed,
            "geometry": {
                "n_elements": int(self.geometry.n_elements),
                "pitch_mm": float(self.geometry.pitch_mm),
                "radius_mm": float(self.geometry.radius_mm),
            },
            "marker_poses": [_pose_out(p) for p in self.marker_poses],
            "observations": [
                {"scan_angle_deg": _deg(o.scan_angle_rad, h), "lateral_mm": o.lateral_mm, "radius_mm": o.radius_mm}
                for o, h in zip(self.observations, scan_hints)
            ],
        }
        if self.calibration is not None:
            line = self.calibration.line_marker
            d["calibration"] = {
                "origin_mm": line.origin.tolist(),
                "direction": line.direction.tolist(),
                "residuals_mm": np.asarray(self.calibration.per_point_residuals_mm, dtype=float).tolist(),
            }
        if self.calibration_input is not None:
            d["calibration_input"] = {
                "spot_camera_mm": self.calibration_input.spot_camera.tolist(),
                "marker_poses": [_pose_out(p) for p in self.calibration_input.marker_poses],
            }
        if self.truth_f_reg is not None or self.truth_delta_theta_rad is not None:
            truth = {}
            if self.truth_f_reg is not None:
                truth["f_reg"] = _pose_out(self.truth_f_reg)
            if self.truth_delta_theta_rad is not None:
                dh = hints.get("truth_dtheta", [None] * len(self.truth_delta_theta_rad))
                truth["delta_theta_deg"] = [_deg(v, h) for v, h in zip(self.truth_delta_theta_rad, dh)]
            d["truth"] = truth
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Dataset:
        if d.get("schema") != SCHEMA:
            raise DatasetError(f"unsupported schema {d.get('schema')!r}; expected {SCHEMA!r}")
        if d.get("units", UNITS) != UNITS:
            raise DatasetError(f"units must be {UNITS}, got {d.get('units')}")
        try:
            geometry = TrusGeometry(**d.get("geometry", {}))
            poses = [_pose_in(p) for p in d["marker_poses"]]
            scan_deg = [float(o["scan_angle_deg"]) for o in d["observations"]]
            obs = [PmObservation(math.radians(a), o["lateral_mm"], o["radius_mm"])
                   for a, o in zip(scan_deg, d["observations"])]
            hints = {"scan": scan_deg}
            calib = None
            if d.get("calibration") is not None:
                c = d["calibration"]
                calib = LaserCalibration(Line3(c["origin_mm"], c["direction"]),
                                         np.asarray(c.get("residuals_mm", [0.0]), dtype=float))
            cin = None
            if d.get("calibration_input") is not None:
                ci = d["calibration_input"]
                cin = CalibrationInput([_pose_in(p) for p in ci["marker_poses"]], ci["spot_camera_mm"])
            truth = d.get("truth") or {}
            f_true = _pose_in(truth["f_reg"]) if "f_reg" in truth else None
            dth = None
            if "delta_theta_deg" in truth:
                dth_deg = [float(v) for v in truth["delta_theta_deg"]]
                dth = [math.radians(v) for v in dth_deg]
                hints["truth_dtheta"] = dth_deg
        except (KeyError, TypeError) as e:
            raise DatasetError(f"malformed dataset: {e!r}") from e
        return cls(poses, obs, geometry, calib, cin, d.get("description", ""), d.get("seed"),
                   f_true, dth, hints)


def _pose_out(p: RigidTransform) -> list[float]:
    return p.matrix().reshape(-1).tolist()


def _pose_in(values) -> RigidTransform:
    a = np.asarray(values, dtype=float)
    if a.shape != (16,):
        raise DatasetError("poses must be 16-element row-major arrays")
    return RigidTransform.from_matrix(a)


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: not valid JSON ({e})") from e
    return Dataset.from_dict(d)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(ds.to_dict(), indent=1) + "\n")
