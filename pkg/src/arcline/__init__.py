"""Arc-to-line registration of a tracked camera and a rotating TRUS probe."""

from .calibration import CalibrationInput, LaserCalibration, calibrate, fit_line_svd
from .dataset import Dataset, read_dataset, write_dataset
from .evaluation import EvalConfig, EvalReport, fit_holdout_eval, loocv, tre
from .geometry import Line3, PmObservation, RigidTransform, TrusGeometry, pm_position
from .registration import RegistrationConfig, RegistrationProblem, RegistrationResult, cost, register
from .tracking import TrackingQuery, plane_deviation_mm, track

__version__ = "0.1.0"

__all__ = [
    "CalibrationInput", "LaserCalibration", "calibrate", "fit_line_svd",
    "Dataset", "read_dataset", "write_dataset",
    "EvalConfig", "EvalReport", "fit_holdout_eval", "loocv", "tre",
    "Line3", "PmObservation", "RigidTransform", "TrusGeometry", "pm_position",
    "RegistrationConfig", "RegistrationProblem", "RegistrationResult", "cost", "register",
    "TrackingQuery", "plane_deviation_mm", "track",
]
