"""Target registration error on held-out pairs, fit/holdout splits and LOOCV."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .geometry import Line3, PmObservation, RigidTransform, TrusGeometry, pm_position
from .registration import (
    DEFAULT_LAMBDA_INIT_MM,
    DEFAULT_THETA_BOUND_RAD,
    RegistrationConfig,
    RegistrationProblem,
    RegistrationResult,
    register,
)
from .tracking import TrackingQuery, track


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    theta_bound_rad: float = DEFAULT_THETA_BOUND_RAD
    lambda_init_mm: float = DEFAULT_LAMBDA_INIT_MM
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    repetitions: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass(frozen=True, eq=False)
class EvalReport:
    tre_mean_mm: float
    tre_std_mm: float
    per_point_errors_mm: np.ndarray
    n_fit: int
    n_holdout: int
    converged: bool = True
    outer_iterations: int = 0
    final_cost_mm: float = float("nan")
    splits: list[tuple[list[int], list[int]]] = field(default_factory=list)

    def to_row(self) -> dict:
        return {
            "n_fit": self.n_fit,
            "n_holdout": self.n_holdout,
            "tre_mean_mm": self.tre_mean_mm,
            "tre_std_mm": self.tre_std_mm,
            "converged": int(self.converged),
            "outer_iterations": self.outer_iterations,
        }


def holdout_errors(f_reg: RigidTransform, holdout_pairs, geometry: TrusGeometry = TrusGeometry(),
                   theta_bound_rad: float = DEFAULT_THETA_BOUND_RAD,
                   lambdas=None, thetas=None) -> np.ndarray:
    """Per-pair distance between the mapped beam point and the arc point.

    With ``lambdas``/``thetas`` (absolute arc angles) given they are used
    as-is; otherwise each pair's depth and angle are re-solved with
    ``f_reg`` frozen.
    """
    holdout_pairs = list(holdout_pairs)
    if not holdout_pairs:
        raise InsufficientData("empty holdout set")
    if (lambdas is None) != (thetas is None):
        raise ValueError("give both lambdas and thetas or neither")
    if lambdas is not None:
        if len(lambdas) != len(holdout_pairs) or len(thetas) != len(holdout_pairs):
            raise ValueError("lambdas/thetas length does not match the holdout set")
        out = []
        for (line, obs), lam, th in zip(holdout_pairs, lambdas, thetas):
            p = f_reg.apply(line.origin + lam * line.direction)
            q = pm_position(geometry, obs, th - obs.scan_angle_rad)
            out.append(float(np.linalg.norm(p - q)))
        return np.array(out)
    errs = []
    for line, obs in holdout_pairs:
        _, _, r = track(TrackingQuery(f_reg, line, obs, geometry, theta_bound_rad))
        errs.append(r)
    return np.array(errs)


def tre(f_reg: RigidTransform, holdout_pairs, lambdas=None, thetas=None,
        geometry: TrusGeometry = TrusGeometry(),
        theta_bound_rad: float = DEFAULT_THETA_BOUND_RAD) -> tuple[float, float, np.ndarray]:
    errs = holdout_errors(f_reg, holdout_pairs, geometry, theta_bound_rad, lambdas, thetas)
    return float(errs.mean()), float(errs.std()), errs


def _register_pairs(pairs, geometry, config: EvalConfig) -> RegistrationResult:
    prob = RegistrationProblem(pairs, geometry, config.theta_bound_rad, config.lambda_init_mm)
    return register(prob, config.registration)


def fit_holdout_eval(dataset: Dataset, n_fit: int, selection_seed: int,
                     config: EvalConfig = EvalConfig(), n_holdout: int | None = None) -> EvalReport:
    """Register on a seeded random subset of ``n_fit`` pairs, score held-out ones.

    The split comes from one seeded permutation: the first ``n_fit`` entries
    are fitted and the last ``n_holdout`` (default: all the rest) are scored,
    so calls with the same seed and different ``n_fit`` use nested fit sets
    and, with ``n_holdout`` fixed, the same holdout. With
    ``config.repetitions > 1`` further permutations are drawn from the same
    generator and the per-point errors are pooled.
    """
    n = len(dataset)
    if n_fit < 3:
        raise InsufficientData("n_fit must be at least 3")
    if n_fit + 1 > n:
        raise InsufficientData(f"n_fit={n_fit} leaves no holdout pair in a dataset of {n}")
    n_hold = n - n_fit if n_holdout is None else n_holdout
    if n_hold < 1 or n_fit + n_hold > n:
        raise InsufficientData(f"cannot hold out {n_hold} of {n} pairs after fitting {n_fit}")
    rng = np.random.default_rng(selection_seed)
    pairs = dataset.pairs()
    errs, splits, iters, costs, ok = [], [], 0, [], True
    for _ in range(config.repetitions):
        perm = rng.permutation(n)
        fit_idx = sorted(int(i) for i in perm[:n_fit])
        hold_idx = sorted(int(i) for i in perm[n - n_hold:])
        res = _register_pairs([pairs[i] for i in fit_idx], dataset.geometry, config)
        e = holdout_errors(res.f_reg, [pairs[i] for i in hold_idx], dataset.geometry, config.theta_bound_rad)
        errs.append(e)
        splits.append((fit_idx, hold_idx))
        iters += res.outer_iterations
        costs.append(res.final_cost_mm)
        ok = ok and res.converged
    per_point = np.concatenate(errs)
    return EvalReport(float(per_point.mean()), float(per_point.std()), per_point, n_fit, n_hold,
                      ok, iters, float(np.mean(costs)), splits)


def loocv(dataset: Dataset, config: EvalConfig = EvalConfig()) -> tuple[float, float, np.ndarray]:
    n = len(dataset)
    if n < 4:
        raise InsufficientData(f"leave-one-out needs at least 4 pairs, got {n}")
    pairs = dataset.pairs()
    folds = []
    for i in range(n):
        res = _register_pairs(pairs[:i] + pairs[i + 1:], dataset.geometry, config)
        folds.append(holdout_errors(res.f_reg, [pairs[i]], dataset.geometry, config.theta_bound_rad)[0])
    folds = np.array(folds)
    return float(folds.mean()), float(folds.std()), folds


def pairs_from_arrays(lines: list[Line3], observations: list[PmObservation]):
    if len(lines) != len(observations):
        raise ValueError("lines and observations differ in length")
    return list(zip(lines, observations))
