import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats as sp_stats

import scenarios
from detector import SCORE_MAX, DetectorConfig, Metric
from evaluation import (
    EmptyClassError,
    ExperimentHarness,
    LabeledScores,
    NoFeasibleThresholdError,
    RocCurve,
    RocPoint,
    ScenarioRoleError,
    TrialTally,
    alpha_upper_bound,
    beta_vs_length,
    expected_attempts,
    mimicry_far,
    np_threshold,
    roc,
    roc_by_scenario,
    run_trials,
    sdr_report,
    tally,
    trial_seed,
)
from signal_model import ROLE_VALID


def quiet_scenario(amplitude):
    spec = scenarios.default_scenario()
    bodies = tuple(replace(b, amplitude_volts=amplitude, amplitude_jitter=0.0) for b in spec.bodies)
    return replace(spec, bodies=bodies)


def test_roc_counts_scores_strictly_above_eta():
    scores = LabeledScores(valid_scores=[0.9, 0.95], invalid_scores=[0.1, 0.8], n_trials=2)
    (point,) = roc(scores, [0.85]).points
    assert (point.alpha, point.beta) == (0.0, 1.0)
    assert point.frr == 0.0


def test_roc_default_grid_spans_both_extremes():
    scores = LabeledScores(valid_scores=[0.9, 0.95], invalid_scores=[0.1, 0.8], n_trials=2)
    curve = roc(scores)
    first, last = curve.points[0], curve.points[-1]
    assert (first.alpha, first.beta) == (1.0, 1.0)
    assert (last.alpha, last.beta) == (0.0, 0.0)
    assert len(curve.points) == 5


def test_roc_is_monotone_in_eta():
    rng = np.random.default_rng(1)
    scores = LabeledScores(valid_scores=list(rng.uniform(0.5, 1, 50)),
                           invalid_scores=list(rng.uniform(0, 0.7, 50)), n_trials=50)
    frame = roc(scores).to_frame()
    assert frame['eta'].is_monotonic_increasing
    assert frame['alpha'].is_monotonic_decreasing
    assert frame['beta'].is_monotonic_decreasing
    assert np.array_equal(frame['frr'], 1.0 - frame['beta'])


def test_gated_trials_count_as_rejections():
    scores = LabeledScores(valid_scores=[0.9], invalid_scores=[0.1], valid_gated=1, invalid_gated=3, n_trials=4)
    (point,) = roc(scores, [0.05]).points
    assert point.beta == 0.5
    assert point.alpha == 0.25
    assert tally(scores, 0.05) == TrialTally(n_valid=2, n_invalid=4, n_true_accept=1, n_false_accept=1)


def test_roc_needs_both_classes():
    with pytest.raises(EmptyClassError):
        roc(LabeledScores(valid_scores=[0.9], invalid_gated=2))


def test_np_threshold_picks_best_feasible_point():
    curve = RocCurve(points=(
        RocPoint(0.1, 0.5, 1.0),
        RocPoint(0.4, 0.02, 0.9),
        RocPoint(0.5, 0.02, 0.9),
        RocPoint(0.8, 0.0, 0.4),
    ), trials_per_point=100)
    assert np_threshold(curve, 0.02) == (0.4, 0.9)
    assert np_threshold(curve, 1.0) == (0.1, 1.0)
    assert np_threshold(curve, 0.0) == (0.8, 0.4)


def test_np_threshold_without_feasible_point_fails():
    curve = RocCurve(points=(RocPoint(0.1, 0.5, 1.0),), trials_per_point=10)
    with pytest.raises(NoFeasibleThresholdError):
        np_threshold(curve, 0.1)
    with pytest.raises(ValueError):
        np_threshold(curve, 1.5)


def test_alpha_upper_bound_matches_binomial_tail():
    assert alpha_upper_bound(0, 100, 0.95) == pytest.approx(1 - 0.05 ** (1 / 100))
    for k in (1, 5, 20):
        upper = alpha_upper_bound(k, 200, 0.95)
        assert upper > k / 200
        assert sp_stats.binom.cdf(k, 200, upper) == pytest.approx(0.05, abs=1e-6)
    assert alpha_upper_bound(7, 7, 0.9) == 1.0


def test_alpha_upper_bound_validates_inputs():
    with pytest.raises(ValueError):
        alpha_upper_bound(1, 10, 1.0)
    with pytest.raises(ValueError):
        alpha_upper_bound(11, 10, 0.95)


def test_np_threshold_with_confidence_keeps_a_margin():
    curve = RocCurve(points=(
        RocPoint(0.1, 0.05, 1.0),
        RocPoint(0.4, 0.01, 0.9),
        RocPoint(0.8, 0.0, 0.4),
    ), trials_per_point=100, n_invalid=100)
    assert np_threshold(curve, 0.05) == (0.1, 1.0)
    assert np_threshold(curve, 0.05, confidence=0.95) == (0.4, 0.9)
    with pytest.raises(NoFeasibleThresholdError):
        np_threshold(curve, 0.02, confidence=0.95)


def test_np_threshold_with_confidence_needs_trial_counts():
    curve = RocCurve(points=(RocPoint(0.1, 0.0, 1.0),), trials_per_point=10)
    with pytest.raises(ValueError):
        np_threshold(curve, 0.05, confidence=0.95)


def test_roc_records_invalid_denominator():
    scores = LabeledScores(valid_scores=[0.9], invalid_scores=[0.1], invalid_gated=3, n_trials=4)
    assert roc(scores).n_invalid == 4


def test_trial_tally_rejects_impossible_counts():
    with pytest.raises(ValueError):
        TrialTally(n_valid=2, n_invalid=2, n_true_accept=3, n_false_accept=0)


def test_expected_attempts():
    assert expected_attempts(0.02) == pytest.approx(50.0)
    assert math.isinf(expected_attempts(0.0))


def test_single_trial_on_identical_pair_scores_one():
    spec = scenarios.pure_carrier_scenario()
    scores = run_trials(spec, DetectorConfig(), n_trials=1, seed=0)
    assert scores.valid_scores == [pytest.approx(1.0)]
    assert scores.n_trials == 1


def test_sub_gate_bodies_gate_every_trial():
    scores = run_trials(quiet_scenario(0.01), DetectorConfig(), n_trials=20, seed=1)
    assert scores.valid_scores == [] and scores.invalid_scores == []
    assert scores.valid_gated == scores.invalid_gated == 20
    with pytest.raises(EmptyClassError):
        roc(scores)


def test_run_trials_is_deterministic_across_workers(default_spec):
    serial = run_trials(default_spec, DetectorConfig(), n_trials=30, seed=7)
    threaded = run_trials(default_spec, DetectorConfig(), n_trials=30, seed=7, workers=4)
    again = run_trials(default_spec, DetectorConfig(), n_trials=30, seed=7)
    assert serial.valid_scores == threaded.valid_scores == again.valid_scores
    assert serial.invalid_scores == threaded.invalid_scores == again.invalid_scores


def test_trial_seeds_are_distinct():
    seeds = {trial_seed(5, i) for i in range(1000)}
    assert len(seeds) == 1000


def test_run_trials_requires_all_roles(default_spec):
    no_valid = replace(default_spec, placements=tuple(
        p for p in default_spec.placements if p.role != ROLE_VALID
    ))
    with pytest.raises(ScenarioRoleError):
        run_trials(no_valid, DetectorConfig(), n_trials=1)


def test_valid_pairs_outscore_invalid_pairs(default_spec):
    scores = run_trials(default_spec, DetectorConfig(), n_trials=100, seed=3)
    assert np.mean(scores.valid_scores) > np.mean(scores.invalid_scores)


def test_single_length_sweep_matches_threshold(default_spec):
    cfg = DetectorConfig()
    frame = beta_vs_length(default_spec, cfg, [1.0], alpha_bound=0.05, n_trials=50, seed=4)
    _, beta = np_threshold(roc(run_trials(default_spec, cfg, 50, 4)), 0.05)
    assert list(frame.columns) == ['length_s', 'alpha_bound', 'beta']
    assert frame.loc[0, 'beta'] == beta


def test_beta_vs_length_rejects_non_positive_length(default_spec):
    with pytest.raises(ValueError):
        beta_vs_length(default_spec, DetectorConfig(), [0.0], n_trials=1)


def test_sdr_report_on_identical_pair_is_capped():
    frame = sdr_report(scenarios.pure_carrier_scenario(), n_trials=3, seed=0)
    row = frame.set_index('pairing').loc['authenticator:valid']
    assert row['mean_sdr_db'] == SCORE_MAX


def test_roc_by_scenario_labels_rows():
    frame = roc_by_scenario(scenarios.FAMILIES['proximity'](2), DetectorConfig(), n_trials=10, seed=2)
    assert list(frame.columns)[:2] == ['scenario', 'eta']
    assert set(frame['scenario']) == set(scenarios.PROXIMITY_SITES)


def test_threshold_summary(default_spec):
    harness = ExperimentHarness(DetectorConfig(), n_trials=40, seed=6)
    summary = harness.threshold_summary(harness.roc_curve(default_spec), [0.02, 1.0])
    assert list(summary['alpha_bound']) == [0.02, 1.0]
    assert (summary['alpha'] <= summary['alpha_bound']).all()
    assert summary.loc[1, 'beta'] == 1.0


@pytest.mark.slow
def test_calibrated_apcc_reaches_target_acceptance(default_spec):
    frame = beta_vs_length(default_spec, DetectorConfig(), [1.0, 5.0], alpha_bound=0.02, n_trials=500, seed=11)
    beta = dict(zip(frame['length_s'], frame['beta']))
    assert beta[1.0] >= 0.92
    assert beta[5.0] >= 0.97
    assert beta[5.0] >= beta[1.0] - 0.01


@pytest.mark.slow
def test_apcc_is_at_least_as_good_as_rmse(default_spec):
    apcc_beta = beta_vs_length(default_spec, DetectorConfig(metric=Metric.APCC), [1.0],
                               n_trials=500, seed=12).loc[0, 'beta']
    rmse_beta = beta_vs_length(default_spec, DetectorConfig(metric=Metric.RMSE_RECIP), [1.0],
                               n_trials=500, seed=12).loc[0, 'beta']
    assert apcc_beta >= rmse_beta


@pytest.mark.slow
def test_longer_windows_defeat_mimicry():
    frame = mimicry_far(scenarios.mimicry_scenario(), scenarios.default_scenario(), DetectorConfig(),
                        [0.1, 1.0], alpha_bound=0.02, n_trials=500, seed=13)
    far = dict(zip(frame['length_s'], frame['far']))
    assert frame['eta'].nunique() == 1
    assert far[1.0] <= far[0.1]
    assert far[1.0] <= 0.05


@pytest.mark.slow
def test_default_sdr_matches_power_ratio():
    spec = scenarios.default_scenario()
    spec = replace(spec, bodies=tuple(replace(b, amplitude_jitter=0.0) for b in spec.bodies))
    spec = replace(spec, placements=tuple(
        replace(p, coupling=1.0) if p.body_id == scenarios.WEARER else p for p in spec.placements
    ))
    frame = sdr_report(spec, n_trials=200, seed=14)
    row = frame.set_index('pairing').loc['authenticator:valid']
    assert row['mean_sdr_db'] == pytest.approx(17.5, abs=1.0)


def random_scenario(rng, index):
    spec = scenarios.default_scenario(seed=index)
    field = replace(spec.field, base_amplitude_volts=float(rng.uniform(0.12, 0.5)),
                    phase_diffusion=float(rng.uniform(0.0, 40.0)))
    changes = {
        scenarios.VALID: dict(coupling=float(rng.uniform(0.5, 1.0)), noise_std=float(rng.uniform(0.0, 0.1))),
        scenarios.INVALID: dict(noise_std=float(rng.uniform(0.0, 0.1))),
    }
    placements = tuple(replace(p, **changes.get(p.placement_id, {})) for p in spec.placements)
    return replace(spec, field=field, placements=placements)


@pytest.mark.slow
def test_roc_properties_hold_across_random_scenarios():
    rng = np.random.default_rng(99)
    for index in range(100):
        scores = run_trials(random_scenario(rng, index), DetectorConfig(), n_trials=20, seed=index)
        curve = roc(scores)
        frame = curve.to_frame()
        assert frame['alpha'].is_monotonic_decreasing
        assert frame['beta'].is_monotonic_decreasing
        assert (frame['frr'] == 1.0 - frame['beta']).all()
        for bound in rng.uniform(0.0, 1.0, 3):
            try:
                eta, _ = np_threshold(curve, bound)
            except NoFeasibleThresholdError:
                continue
            assert tally(scores, eta).alpha <= bound
