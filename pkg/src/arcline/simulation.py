"""Synthetic scenes, marker/aiming noise and Monte-Carlo sweeps.

Every trial draws from its own generator seeded with ``(master_seed,
trial_index)``, so a table does not depend on how trials are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .calibration import CalibrationInput, LaserCalibration, calibrate, laser_line_in_camera
from .dataset import Dataset
from .geometry import (
    Line3,
    PmObservation,
    RigidTransform,
    TrusGeometry,
    pm_position,
    rot_x,
    rot_y,
    rot_z,
)
from .registration import RegistrationConfig, RegistrationProblem, register

DEG = math.pi / 180.0
CALIB_POSE_COUNTS = (5, 10, 20, 30, 40)
DEVIATIONS_DEG = (0.0, 5.0, 10.0, 15.0, 20.0)
# used as the solver window when the sweep deviation is zero
MIN_THETA_BOUND_RAD = 0.01 * DEG


@dataclass(frozen=True)
class NoiseModel:
    marker_mean_mm: tuple[float, float, float] = (0.1, 0.1, 0.1)
    marker_sigma_trans_mm: tuple[float, float, float] = (0.1, 0.1, 0.8)
    marker_sigma_rot_rad: tuple[float, float, float] = (0.01, 0.01, 0.01)
    aim_sigma_mm: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        for name in ("marker_sigma_trans_mm", "marker_sigma_rot_rad", "aim_sigma_mm"):
            if any(s < 0 for s in getattr(self, name)):
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def zero(cls) -> NoiseModel:
        return cls((0.0,) * 3, (0.0,) * 3, (0.0,) * 3, (0.0, 0.0))

    def scaled(self, aim: float = 1.0) -> NoiseModel:
        return replace(self, aim_sigma_mm=tuple(aim * s for s in self.aim_sigma_mm))


@dataclass(frozen=True)
class SimConfig:
    n_pairs: int = 10
    n_holdout: int = 5
    deviation_range_rad: float = 6.0 * DEG
    noise: NoiseModel = field(default_factory=NoiseModel)
    trials: int = 100
    master_seed: int = 0
    theta_bound_rad: float = 6.0 * DEG
    apply_detectability_gate: bool = False
    geometry: TrusGeometry = field(default_factory=TrusGeometry)
    # scene layout (TRUS frame unless stated otherwise)
    scan_fov_rad: float = 70.0 * DEG
    pm_radius_range_mm: tuple[float, float] = (20.0, 50.0)
    standoff_range_mm: tuple[float, float] = (30.0, 80.0)
    beam_cone_rad: float = 30.0 * DEG
    # cone axis leans from the inward radial direction towards +x by this much
    beam_tilt_rad: float = 0.0
    tip_in_marker_mm: tuple[float, float, float] = (0.0, 10.0, 40.0)
    translation_box_mm: float = 100.0
    lambda_init_mm: float = 50.0
    theta_quant_rad: float = 0.0
    # calibration sweep
    calib_pose_counts: tuple[int, ...] = CALIB_POSE_COUNTS
    calib_standoff_range_mm: tuple[float, float] = (10.0, 50.0)
    calib_cone_rad: float = 30.0 * DEG
    # registration sweep
    deviations_rad: tuple[float, ...] = tuple(d * DEG for d in DEVIATIONS_DEG)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.n_pairs < 3:
            raise ValueError("n_pairs must be >= 3")
        if self.theta_bound_rad <= 0:
            raise ValueError("theta_bound_rad must be > 0")
        if self.deviation_range_rad < 0:
            raise ValueError("deviation_range_rad must be >= 0")
        lo, hi = self.pm_radius_range_mm
        if not 10.0 <= lo <= hi <= 60.0:
            raise ValueError("pm_radius_range_mm must lie within the [10, 60] mm imaging depth")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseModel(**{k: tuple(v) for k, v in d["noise"].items()})
        if "geometry" in d and isinstance(d["geometry"], dict):
            d["geometry"] = TrusGeometry(**d["geometry"])
        for f in fields(cls):
            if f.name in d and isinstance(d[f.name], list):
                d[f.name] = tuple(d[f.name])
        return cls(**d)


def trial_rng(master_seed: int, trial: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(trial), int(stream)])


def perturb_marker_pose(pose: RigidTransform, noise: NoiseModel, rng: np.random.Generator) -> RigidTransform:
    """Detected version of the marker->camera pose ``pose``.

    Translation gets ``mean + N(0, sigma)`` per camera axis; the rotation is
    pre-multiplied by small rotations about x, then y, then z.
    """
    dt = np.asarray(noise.marker_mean_mm) + rng.normal(0.0, 1.0, 3) * np.asarray(noise.marker_sigma_trans_mm)
    a = rng.normal(0.0, 1.0, 3) * np.asarray(noise.marker_sigma_rot_rad)
    d_rot = rot_z(a[2]) @ rot_y(a[1]) @ rot_x(a[0])
    return RigidTransform(d_rot @ pose.rotation, pose.translation + dt)


def perturb_aim(spot, noise: NoiseModel, rng: np.random.Generator,
                board_u=(1.0, 0.0, 0.0), board_v=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Displace ``spot`` inside the aiming board plane spanned by ``board_u``, ``board_v``."""
    u = np.asarray(board_u, dtype=float)
    v = np.asarray(board_v, dtype=float)
    u = u / np.linalg.norm(u)
    v = v - (v @ u) * u
    v = v / np.linalg.norm(v)
    e = rng.normal(0.0, 1.0, 2) * np.asarray(noise.aim_sigma_mm)
    return np.asarray(spot, dtype=float) + e[0] * u + e[1] * v


def detectability(delta_theta: float, theta_max: float) -> bool:
    if not theta_max > 0:
        raise ValueError("theta_max must be > 0")
    return bool(abs(delta_theta) <= theta_max)


def search_step_estimate(fov_rad: float, theta_max_rad: float, actuator_res_rad: float) -> tuple[int, int]:
    """Worst-case rotation steps to find a PM: window sweep plus fine search vs window sweep only."""
    if min(fov_rad, theta_max_rad, actuator_res_rad) <= 0:
        raise ValueError("all arguments must be positive")
    window = 2.0 * theta_max_rad
    # round before ceil so 70/12 style ratios are not pushed up by float error
    coarse = math.ceil(round(fov_rad / window, 9))
    fine = math.ceil(round(window / actuator_res_rad, 9))
    return coarse + fine, coarse


def _frame_with_z(z: np.ndarray, roll: float) -> np.ndarray:
    """Rotation whose third column is ``z``, rolled by ``roll`` about it."""
    z = z / np.linalg.norm(z)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    base = np.column_stack([x, y, z])
    return base @ rot_z(roll)


def marker_line(config: SimConfig) -> Line3:
    """Beam line in the marker frame: starts at the fibre tip, points along +z."""
    return Line3(config.tip_in_marker_mm, [0.0, 0.0, 1.0])


def true_calibration(config: SimConfig) -> LaserCalibration:
    return LaserCalibration(marker_line(config), np.zeros(1))


def marker_pose_for_beam(config: SimConfig, tip_c: np.ndarray, beam_c: np.ndarray, roll: float) -> RigidTransform:
    """Marker->camera pose placing the fibre tip at ``tip_c`` and the beam along ``beam_c``."""
    r = _frame_with_z(beam_c, roll)
    return RigidTransform(r, tip_c - r @ np.asarray(config.tip_in_marker_mm))


@dataclass(frozen=True, eq=False)
class Scene:
    f_reg_true: RigidTransform
    marker_poses_true: list[RigidTransform]  # marker -> camera
    pm_camera: np.ndarray  # (n, 3)
    observations: list[PmObservation]
    delta_thetas_true: np.ndarray
    lambdas_true: np.ndarray
    geometry: TrusGeometry
    calibration: LaserCalibration

    @property
    def fiber_poses_true(self) -> list[RigidTransform]:
        return self.marker_poses_true

    def true_lines(self) -> list[Line3]:
        return [laser_line_in_camera(self.calibration, p) for p in self.marker_poses_true]

    def pm_trus(self) -> np.ndarray:
        return self.f_reg_true.apply(self.pm_camera)

    def consistency_error(self) -> float:
        """Worst mismatch of the truth against its own line and arc models (mm)."""
        worst = 0.0
        for line, obs, lam, dth, p_c in zip(self.true_lines(), self.observations, self.lambdas_true,
                                            self.delta_thetas_true, self.pm_camera):
            on_line = np.linalg.norm(line.origin + lam * line.direction - p_c)
            on_arc = np.linalg.norm(pm_position(self.geometry, obs, dth) - self.f_reg_true.apply(p_c))
            worst = max(worst, on_line, on_arc)
        return float(worst)


def _random_rigid(config: SimConfig, rng: np.random.Generator) -> RigidTransform:
    rot = Rotation.random(random_state=rng).as_matrix()
    t = rng.uniform(-config.translation_box_mm, config.translation_box_mm, 3)
    return RigidTransform(rot, t)


def generate_scene(config: SimConfig, rng: np.random.Generator, n_pairs: int | None = None,
                   deviation_rad: float | None = None, unit_deviations=None) -> Scene:
    """Sample a ground-truth scene that satisfies the line and arc models exactly.

    ``unit_deviations`` (values in [-1, 1]) fixes the deviation pattern so
    that sweeps can reuse one scene at several deviation widths.
    """
    n = config.n_pairs + config.n_holdout if n_pairs is None else n_pairs
    dev = config.deviation_range_rad if deviation_rad is None else deviation_rad
    g = config.geometry
    calib = true_calibration(config)
    f_reg = _random_rigid(config, rng)
    f_inv = f_reg.inverse()
    lo_r, hi_r = config.pm_radius_range_mm
    lo_s, hi_s = config.standoff_range_mm

    poses, pts, obs, dths, lams = [], [], [], [], []
    attempts = 0
    while len(obs) < n:
        attempts += 1
        if attempts > 10_000:
            raise RuntimeError("infeasible scene config")
        scan = rng.uniform(-0.5 * config.scan_fov_rad, 0.5 * config.scan_fov_rad)
        if config.theta_quant_rad > 0:
            scan = round(scan / config.theta_quant_rad) * config.theta_quant_rad
        lateral = rng.uniform(-g.half_aperture_mm, g.half_aperture_mm)
        radius = rng.uniform(lo_r, hi_r)
        u = rng.uniform(-1.0, 1.0) if unit_deviations is None else unit_deviations[len(obs)]
        standoff = rng.uniform(lo_s, hi_s)
        roll = rng.uniform(0.0, 2 * math.pi)
        cone_u = rng.uniform(size=2)
        dth = u * dev
        if config.apply_detectability_gate and not detectability(dth, config.theta_bound_rad):
            continue
        o = PmObservation(scan, lateral, radius)
        p_trus = pm_position(g, o, dth)
        # beam heads back towards the probe axis, inside a cone
        radial = np.array([0.0, math.sin(scan + dth), math.cos(scan + dth)])
        axis = math.sin(config.beam_tilt_rad) * np.array([1.0, 0.0, 0.0]) - math.cos(config.beam_tilt_rad) * radial
        beam_trus = _cone_from_uniforms(axis, config.beam_cone_rad, cone_u)
        beam_c = f_inv.apply_vector(beam_trus)
        p_c = f_inv.apply(p_trus)
        tip_c = p_c - standoff * beam_c
        poses.append(marker_pose_for_beam(config, tip_c, beam_c, roll))
        pts.append(p_c)
        obs.append(o)
        dths.append(dth)
        lams.append(standoff)
    return Scene(f_reg, poses, np.array(pts), obs, np.array(dths), np.array(lams), g, calib)


def _cone_from_uniforms(axis: np.ndarray, half_angle: float, uv) -> np.ndarray:
    cos_t = math.cos(half_angle) + (1.0 - math.cos(half_angle)) * uv[0]
    phi = 2 * math.pi * uv[1]
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return cos_t * axis + sin_t * (math.cos(phi) * e1 + math.sin(phi) * e2)


def noisy_lines(scene: Scene, noise: NoiseModel, rng: np.random.Generator,
                calibration: LaserCalibration | None = None) -> tuple[list[Line3], list[RigidTransform]]:
    """Camera-frame beam lines seen through noisy marker detection.

    Returns the lines and the detected marker->camera poses.
    """
    calib = scene.calibration if calibration is None else calibration
    detected = [perturb_marker_pose(p, noise, rng) for p in scene.marker_poses_true]
    return [laser_line_in_camera(calib, p) for p in detected], detected


def scene_problem(scene: Scene, lines: list[Line3], idx, config: SimConfig,
                  theta_bound_rad: float | None = None) -> RegistrationProblem:
    bound = config.theta_bound_rad if theta_bound_rad is None else theta_bound_rad
    return RegistrationProblem(
        [(lines[i], scene.observations[i]) for i in idx],
        scene.geometry,
        theta_bound_rad=bound,
        lambda_init_mm=config.lambda_init_mm,
    )


def ground_truth_tre(f_est: RigidTransform, scene: Scene, idx) -> np.ndarray:
    """Per-target distance between estimated and true TRUS positions of the true PMs."""
    p = scene.pm_camera[list(idx)]
    return np.linalg.norm(f_est.apply(p) - scene.f_reg_true.apply(p), axis=1)


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True, eq=False)
class CalibrationScene:
    spot_camera: np.ndarray
    board_u: np.ndarray
    board_v: np.ndarray
    marker_poses_true: list[RigidTransform]  # marker -> camera, beam through the aimed point
    aimed_points: np.ndarray
    calibration: LaserCalibration


def generate_calibration_scene(config: SimConfig, rng: np.random.Generator, n_poses: int,
                               noise: NoiseModel | None = None, near_first: bool = False) -> CalibrationScene:
    """Fibre poses aimed by hand at one spot on a flat board.

    The board is the plane ``z = 0`` of a frame placed in front of the
    camera; every beam comes from the camera side inside a cone about the
    board normal and hits the spot up to the aiming error.

    With ``near_first`` the poses are recorded from the closest standoff to
    the farthest. The fitted line then starts at the sample nearest the
    fibre tip and points down the beam, which is what ``lambda >= 0``
    needs downstream.
    """
    noise = config.noise if noise is None else noise
    spot = np.array([0.0, 0.0, 300.0])
    normal = np.array([0.0, 0.0, -1.0])  # towards the camera
    u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    lo, hi = config.calib_standoff_range_mm
    poses, aimed, standoff = [], [], []
    for _ in range(n_poses):
        target = perturb_aim(spot, noise, rng, u, v)
        beam = -_cone_from_uniforms(normal, config.calib_cone_rad, rng.uniform(size=2))
        standoff.append(rng.uniform(lo, hi))
        tip = target - standoff[-1] * beam
        poses.append(marker_pose_for_beam(config, tip, beam, rng.uniform(0.0, 2 * math.pi)))
        aimed.append(target)
    if near_first:
        order = np.argsort(standoff, kind="stable")
        poses, aimed = [poses[i] for i in order], [aimed[i] for i in order]
    return CalibrationScene(spot, u, v, poses, np.array(aimed), true_calibration(config))


def detected_calibration_input(scene: CalibrationScene, noise: NoiseModel,
                               rng: np.random.Generator) -> CalibrationInput:
    detected = [perturb_marker_pose(p, noise, rng) for p in scene.marker_poses_true]
    return CalibrationInput([p.inverse() for p in detected], scene.spot_camera)


def calibration_trial(config: SimConfig, trial: int, noise: NoiseModel | None = None,
                      n_validation: int = 40) -> dict[int, tuple[float, float]]:
    """One paired calibration trial over every pose count in the config.

    A single pool of ``max(counts)`` fit poses is drawn and the first ``N``
    are used for count ``N``; an independent set of validation poses scores
    each fitted line. Returns ``{N: (validation residual, in-sample residual)}``.
    """
    noise = config.noise if noise is None else noise
    counts = config.calib_pose_counts
    rng = trial_rng(config.master_seed, trial, 2)
    fit_scene = generate_calibration_scene(config, rng, max(counts), noise)
    fit_in = detected_calibration_input(fit_scene, noise, rng)
    val_scene = generate_calibration_scene(config, rng, n_validation, noise)
    val_in = detected_calibration_input(val_scene, noise, rng)
    val_pts = np.array([f.apply(val_in.spot_camera) for f in val_in.marker_poses])
    out = {}
    for n in counts:
        sub = CalibrationInput(fit_in.marker_poses[:n], fit_in.spot_camera)
        cal = calibrate(sub)
        out[n] = (float(np.mean(cal.line_marker.distance_to(val_pts))), cal.residual_mm)
    return out


def run_calibration_sweep(config: SimConfig, noise: NoiseModel | None = None,
                          n_validation: int = 40) -> list[dict]:
    """Mean and std, over trials, of the validation residual at each pose count.

    The in-sample residual (mean distance of the fitted points to their own
    line) is reported alongside; it grows slightly with the pose count
    because fewer degrees of freedom are absorbed per point.
    """
    per_trial = [calibration_trial(config, t, noise, n_validation) for t in range(config.trials)]
    rows = []
    for n in config.calib_pose_counts:
        val = np.array([r[n][0] for r in per_trial])
        fit = np.array([r[n][1] for r in per_trial])
        rows.append({"n_poses": n, "mean_residual_mm": float(val.mean()), "std_mm": float(val.std()),
                     "fit_residual_mm": float(fit.mean())})
    return rows


# --------------------------------------------------------------- registration

def registration_trial(config: SimConfig, trial: int,
                       registration: RegistrationConfig = RegistrationConfig()) -> list[dict]:
    """One scene registered at every deviation width in the config.

    Scene layout and marker noise are shared across widths; each PM keeps
    its deviation sign and sits at exactly ``+/-width`` off the scan plane.
    The solver window equals the width (a tiny window at zero). TRE is
    measured against the true PM positions of the held-out pairs.
    """
    n_fit, n_hold = config.n_pairs, config.n_holdout
    signs = np.where(trial_rng(config.master_seed, trial, 1).uniform(-1.0, 1.0, n_fit + n_hold) < 0, -1.0, 1.0)
    rows = []
    for dev in config.deviations_rad:
        rng = trial_rng(config.master_seed, trial)
        scene = generate_scene(config, rng, n_fit + n_hold, dev, signs)
        lines, _ = noisy_lines(scene, config.noise, rng)
        bound = max(dev, MIN_THETA_BOUND_RAD)
        res = register(scene_problem(scene, lines, range(n_fit), config, bound), registration)
        err = ground_truth_tre(res.f_reg, scene, range(n_fit, n_fit + n_hold))
        rows.append({"deviation_deg": round(dev / DEG, 9), "trial": trial, "tre_mm": float(err.mean()),
                     "iters": res.outer_iterations, "converged": int(res.converged)})
    return rows


def run_registration_sweep(config: SimConfig,
                           registration: RegistrationConfig = RegistrationConfig()) -> tuple[list[dict], list[dict]]:
    """Per-trial rows and the per-deviation summary (mean/std TRE, mean outer iterations)."""
    rows = [r for t in range(config.trials) for r in registration_trial(config, t, registration)]
    summary = []
    for dev in config.deviations_rad:
        sel = [r for r in rows if r["deviation_deg"] == round(dev / DEG, 9)]
        tre = np.array([r["tre_mm"] for r in sel])
        summary.append({"deviation_deg": round(dev / DEG, 9), "mean_tre_mm": float(tre.mean()), "std_mm": float(tre.std()),
                        "mean_outer_iters": float(np.mean([r["iters"] for r in sel]))})
    return rows, summary


# ----------------------------------------------------------------- datasets

def simulate_dataset(config: SimConfig, seed: int, n_pairs: int | None = None,
                     calibration_poses: int | None = None) -> Dataset:
    """A noisy acquisition session written the way a real one would be.

    The PM deviations follow ``config`` (uniform in ``+/-deviation_range_rad``,
    gated when requested). With ``calibration_poses`` the laser line is
    itself estimated from a simulated aiming session of that many poses;
    otherwise the true line is stored.
    """
    n = config.n_pairs + config.n_holdout if n_pairs is None else n_pairs
    rng = trial_rng(config.master_seed, seed, 3)
    scene = generate_scene(config, rng, n)
    _, detected = noisy_lines(scene, config.noise, rng)
    calib = scene.calibration
    cin = None
    if calibration_poses is not None:
        cscene = generate_calibration_scene(config, rng, calibration_poses, near_first=True)
        cin = detected_calibration_input(cscene, config.noise, rng)
        calib = calibrate(cin)
    return Dataset(
        marker_poses=[p.inverse() for p in detected],
        observations=list(scene.observations),
        geometry=scene.geometry,
        calibration=calib,
        calibration_input=cin,
        description=f"simulated session, {n} pairs",
        seed=int(seed),
        truth_f_reg=scene.f_reg_true,
        truth_delta_theta_rad=[float(v) for v in scene.delta_thetas_true],
    )


def run_pose_count_sweep(config: SimConfig, datasets: int, counts=range(4, 11), n_holdout: int = 5,
                         repetitions: int = 1, eval_config=None) -> list[dict]:
    """Holdout TRE against the number of fitted pairs on simulated sessions.

    Each session has ``config.n_pairs + config.n_holdout`` pairs. For a
    given session and split the fit sets are nested and the holdout is the
    same for every count.
    """
    from .evaluation import EvalConfig, fit_holdout_eval

    ec = EvalConfig(theta_bound_rad=config.theta_bound_rad, lambda_init_mm=config.lambda_init_mm,
                    repetitions=repetitions) if eval_config is None else eval_config
    per = {n: [] for n in counts}
    for s in range(datasets):
        ds = simulate_dataset(config, s)
        for n in counts:
            per[n].append(fit_holdout_eval(ds, n, s, ec, n_holdout).tre_mean_mm)
    return [{"n_fit": n, "mean_tre_mm": float(np.mean(per[n])), "std_mm": float(np.std(per[n]))}
            for n in counts]
