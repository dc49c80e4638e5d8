import numpy as np
import pytest

from arcline.evaluation import EvalConfig, InsufficientData, fit_holdout_eval, holdout_errors, loocv, tre
from arcline.geometry import Line3, PmObservation, RigidTransform, TrusGeometry, pm_position
from arcline.registration import register
from arcline.simulation import NoiseModel, SimConfig, simulate_dataset

from .scenes import problem_from_scene

G = TrusGeometry()


def _pair_at(obs, dtheta=0.0, offset=(0.0, 0.0, 0.0)):
    target = pm_position(G, obs, dtheta) + np.asarray(offset)
    return Line3(target + [0.0, 0.0, 20.0], [0.0, 0.0, -1.0]), obs


def test_consistent_holdout_scores_zero():
    pairs = [_pair_at(PmObservation(0.1 * k, k, 25.0 + k), 0.01 * k) for k in range(5)]
    mean, std, per = tre(RigidTransform(), pairs)
    assert mean < 1e-9 and std < 1e-9 and per.shape == (5,)


def test_forced_two_mm_residual():
    # shift the beam sideways along x, which no arc angle can absorb
    pairs = [_pair_at(PmObservation(0.0, 0.0, 30.0), offset=(2.0, 0.0, 0.0))]
    mean, std, _ = tre(RigidTransform(), pairs)
    assert mean == pytest.approx(2.0, abs=1e-9)
    assert std == 0.0


def test_empty_holdout_rejected():
    with pytest.raises(InsufficientData):
        tre(RigidTransform(), [])


def test_fixed_depth_and_angle_match_training_cost():
    for seed in range(3):
        prob, _ = problem_from_scene(seed, noise=NoiseModel())
        res = register(prob)
        mean, _, _ = tre(res.f_reg, prob.pairs, res.lambdas_mm, res.thetas_rad, prob.geometry)
        assert mean == pytest.approx(res.final_cost_mm / len(prob), abs=1e-9)


def test_explicit_values_need_both():
    pairs = [_pair_at(PmObservation(0.0, 0.0, 30.0))]
    with pytest.raises(ValueError):
        holdout_errors(RigidTransform(), pairs, lambdas=[1.0])


@pytest.fixture(scope="module")
def noisy_ds():
    return simulate_dataset(SimConfig(apply_detectability_gate=True), seed=3)


def test_fit_holdout_sizes_and_determinism(noisy_ds):
    a = fit_holdout_eval(noisy_ds, 10, 7)
    b = fit_holdout_eval(noisy_ds, 10, 7)
    assert (a.n_fit, a.n_holdout) == (10, len(noisy_ds) - 10)
    assert a.splits == b.splits
    np.testing.assert_array_equal(a.per_point_errors_mm, b.per_point_errors_mm)
    assert a.tre_mean_mm == pytest.approx(np.mean(a.per_point_errors_mm), abs=1e-15)
    fit, hold = a.splits[0]
    assert not set(fit) & set(hold)
    assert a.to_row()["n_holdout"] == 5


def test_single_holdout_split(noisy_ds):
    r = fit_holdout_eval(noisy_ds, len(noisy_ds) - 1, 0)
    assert r.n_holdout == 1 and r.per_point_errors_mm.shape == (1,)


def test_nested_fit_sets_share_holdout(noisy_ds):
    small = fit_holdout_eval(noisy_ds, 4, 5, n_holdout=5)
    big = fit_holdout_eval(noisy_ds, 8, 5, n_holdout=5)
    assert set(small.splits[0][0]) <= set(big.splits[0][0])
    assert small.splits[0][1] == big.splits[0][1]


def test_repetitions_pool_errors(noisy_ds):
    r = fit_holdout_eval(noisy_ds, 10, 1, EvalConfig(repetitions=3))
    assert len(r.splits) == 3 and r.per_point_errors_mm.shape == (15,)


def test_insufficient_data(noisy_ds):
    with pytest.raises(InsufficientData):
        fit_holdout_eval(noisy_ds, len(noisy_ds), 0)
    with pytest.raises(InsufficientData):
        fit_holdout_eval(noisy_ds, 2, 0)
    small = simulate_dataset(SimConfig(n_pairs=3, n_holdout=0), seed=0)
    with pytest.raises(InsufficientData):
        loocv(small)
    with pytest.raises(ValueError):
        EvalConfig(repetitions=0)


def test_loocv_noiseless():
    ds = simulate_dataset(SimConfig(noise=NoiseModel.zero(), n_pairs=12, n_holdout=0), seed=9)
    mean, _, folds = loocv(ds)
    assert folds.shape == (len(ds),)
    assert np.all(folds < 0.01)


def test_loocv_fold_count(noisy_ds):
    _, _, folds = loocv(noisy_ds)
    assert folds.shape == (len(noisy_ds),)
    # a couple of millimetres under the default noise
    assert 0.5 < folds.mean() < 6.0


def test_registration_then_holdout_on_same_pairs_is_consistent():
    prob, _ = problem_from_scene(2, n_pairs=8)
    res = register(prob)
    errs = holdout_errors(res.f_reg, prob.pairs, prob.geometry, prob.theta_bound_rad)
    assert np.all(errs < 1e-6)
