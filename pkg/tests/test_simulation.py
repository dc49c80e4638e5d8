import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from arcline.geometry import RigidTransform, pm_position
from arcline.simulation import (
    DEG,
    NoiseModel,
    SimConfig,
    detectability,
    generate_scene,
    noisy_lines,
    perturb_aim,
    perturb_marker_pose,
    registration_trial,
    run_calibration_sweep,
    run_registration_sweep,
    search_step_estimate,
    simulate_dataset,
    trial_rng,
)

from .conftest import random_rigid

N_STAT = 100_000


def test_zero_noise_leaves_pose(rng):
    pose = random_rigid(rng)
    out = perturb_marker_pose(pose, NoiseModel.zero(), rng)
    assert out.allclose(pose, atol=0.0)


def test_mean_only_shifts_translation(rng):
    pose = random_rigid(rng)
    noise = NoiseModel((0.1, 0.1, 0.1), (0.0,) * 3, (0.0,) * 3, (0.0, 0.0))
    out = perturb_marker_pose(pose, noise, rng)
    np.testing.assert_allclose(out.translation - pose.translation, [0.1, 0.1, 0.1], atol=1e-12)
    np.testing.assert_array_equal(out.rotation, pose.rotation)


def test_marker_noise_statistics():
    noise = NoiseModel()
    rng = np.random.default_rng(5)
    pose = RigidTransform()
    shifts = np.array([perturb_marker_pose(pose, noise, rng).translation for _ in range(N_STAT)])
    mu, sigma = np.array(noise.marker_mean_mm), np.array(noise.marker_sigma_trans_mm)
    se = sigma / math.sqrt(N_STAT)
    assert np.all(np.abs(shifts.mean(axis=0) - mu) < 3 * se)
    assert np.all(np.abs(shifts.std(axis=0) / sigma - 1.0) < 0.05)


def test_marker_rotation_noise_scale():
    noise = NoiseModel()
    rng = np.random.default_rng(6)
    pose = RigidTransform()
    angles = np.array([perturb_marker_pose(pose, noise, rng).rotation_angle_to(pose) for _ in range(20_000)])
    # three independent 0.01 rad components: rms angle sqrt(3) * 0.01
    assert math.sqrt(np.mean(angles ** 2)) == pytest.approx(math.sqrt(3) * 0.01, rel=0.03)


def test_aim_zero_sigma_unchanged(rng):
    spot = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(perturb_aim(spot, NoiseModel.zero(), rng), spot)


def test_aim_noise_stays_on_board():
    rng = np.random.default_rng(8)
    u, v = np.array([1.0, 1.0, 0.0]), np.array([0.0, 0.3, 1.0])
    normal = np.cross(u, v)
    normal /= np.linalg.norm(normal)
    spot = np.array([5.0, -2.0, 300.0])
    d = np.array([perturb_aim(spot, NoiseModel(), rng, u, v) for _ in range(N_STAT)]) - spot
    assert np.max(np.abs(d @ normal)) < 1e-12
    e1 = u / np.linalg.norm(u)
    e2 = np.cross(normal, e1)
    sd = np.array([(d @ e1).std(), (d @ e2).std()])
    assert np.all(np.abs(sd - 1.0) < 0.05)


@pytest.mark.parametrize("dt,tm,expected", [(5, 6, True), (6.1, 6, False), (-6, 6, True), (6, 6, True)])
def test_detectability_examples(dt, tm, expected):
    assert detectability(dt * DEG, tm * DEG) is expected


def test_detectability_needs_positive_window():
    with pytest.raises(ValueError):
        detectability(0.0, 0.0)


def test_search_step_examples():
    assert search_step_estimate(70 * DEG, 6 * DEG, 0.1 * DEG) == (126, 6)
    assert search_step_estimate(12 * DEG, 6 * DEG, 0.1 * DEG) == (121, 1)
    conv, prop = search_step_estimate(70 * DEG, 6 * DEG, 12 * DEG)
    assert conv == prop + 1
    with pytest.raises(ValueError):
        search_step_estimate(70 * DEG, 0.0, 0.1 * DEG)


@given(st.integers(0, 2**32 - 1), st.integers(3, 20), st.floats(0.0, 25.0))
def test_scenes_are_self_consistent(seed, n, dev_deg):
    cfg = SimConfig(deviation_range_rad=dev_deg * DEG)
    scene = generate_scene(cfg, np.random.default_rng(seed), n)
    assert scene.consistency_error() < 1e-9
    assert np.all(np.abs(scene.delta_thetas_true) <= dev_deg * DEG + 1e-15)
    radii = np.array([o.radius_mm for o in scene.observations])
    assert np.all((radii >= 10) & (radii <= 60))
    assert np.all(scene.lambdas_true > 0)


def test_gate_bounds_deviation():
    cfg = SimConfig(deviation_range_rad=20 * DEG, apply_detectability_gate=True, theta_bound_rad=6 * DEG)
    scene = generate_scene(cfg, trial_rng(1, 2), 50)
    assert np.all(np.abs(scene.delta_thetas_true) <= 6 * DEG)


def test_infeasible_config_raises():
    cfg = SimConfig(deviation_range_rad=20 * DEG, apply_detectability_gate=True, theta_bound_rad=1e-9)
    with pytest.raises(RuntimeError, match="infeasible scene config"):
        generate_scene(cfg, trial_rng(0, 0), 5)


def test_same_seed_same_scene():
    cfg = SimConfig()
    a = generate_scene(cfg, trial_rng(3, 4), 12)
    b = generate_scene(cfg, trial_rng(3, 4), 12)
    np.testing.assert_array_equal(a.pm_camera, b.pm_camera)
    np.testing.assert_array_equal(a.f_reg_true.matrix(), b.f_reg_true.matrix())
    la, _ = noisy_lines(a, cfg.noise, trial_rng(3, 5))
    lb, _ = noisy_lines(b, cfg.noise, trial_rng(3, 5))
    for x, y in zip(la, lb):
        np.testing.assert_array_equal(x.origin, y.origin)


def test_trial_streams_differ():
    assert trial_rng(0, 1).uniform() != trial_rng(0, 2).uniform()
    assert trial_rng(0, 1, 0).uniform() != trial_rng(0, 1, 1).uniform()


def test_zero_noise_calibration_sweep():
    cfg = SimConfig(noise=NoiseModel.zero(), trials=3)
    for row in run_calibration_sweep(cfg):
        assert row["mean_residual_mm"] < 1e-9
        assert row["fit_residual_mm"] < 1e-9


def test_doubling_aim_noise_raises_residuals():
    cfg = SimConfig(trials=100)
    base = run_calibration_sweep(cfg)
    wide = run_calibration_sweep(cfg, noise=cfg.noise.scaled(aim=2.0))
    for a, b in zip(base, wide):
        assert b["mean_residual_mm"] > a["mean_residual_mm"]


def test_zero_noise_zero_deviation_registration_is_exact():
    cfg = SimConfig(noise=NoiseModel.zero(), deviations_rad=(0.0,))
    for t in range(3):
        (row,) = registration_trial(cfg, t)
        assert row["tre_mm"] < 0.01
        assert row["converged"] == 1


def test_registration_sweep_reproducible():
    cfg = SimConfig(trials=2, deviations_rad=(0.0, 10 * DEG), master_seed=11)
    a = run_registration_sweep(cfg)
    b = run_registration_sweep(cfg)
    assert json.dumps(a) == json.dumps(b)
    assert [r["deviation_deg"] for r in a[1]] == [0.0, 10.0]


def test_config_round_trip():
    cfg = SimConfig(trials=7, apply_detectability_gate=True, noise=NoiseModel().scaled(aim=0.5))
    text = json.dumps(cfg.to_dict())
    assert SimConfig.from_dict(json.loads(text)) == cfg


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ValueError):
        SimConfig.from_dict({"trails": 3})
    with pytest.raises(ValueError):
        SimConfig(trials=0)
    with pytest.raises(ValueError):
        NoiseModel(aim_sigma_mm=(-1.0, 1.0))
    with pytest.raises(ValueError):
        SimConfig(pm_radius_range_mm=(5.0, 70.0))


def test_theta_quantization():
    cfg = SimConfig(theta_quant_rad=2 * DEG)
    scene = generate_scene(cfg, trial_rng(0, 0), 10)
    steps = np.array([o.scan_angle_rad for o in scene.observations]) / (2 * DEG)
    np.testing.assert_allclose(steps, np.round(steps), atol=1e-9)


def test_simulated_dataset_carries_truth():
    ds = simulate_dataset(SimConfig(noise=NoiseModel.zero()), seed=2, calibration_poses=8)
    assert len(ds) == 15
    assert ds.calibration is not None and ds.calibration_input is not None
    assert len(ds.truth_delta_theta_rad) == 15
    for (line, obs), dth in zip(ds.pairs(), ds.truth_delta_theta_rad):
        p = ds.truth_f_reg.inverse().apply(pm_position(ds.geometry, obs, dth))
        assert line.distance_to(p) < 1e-6
