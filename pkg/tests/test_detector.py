import numpy as np
import pytest
from scipy import stats as sp_stats

import scenarios
from detector import (
    SCORE_MAX,
    ContactDetector,
    DetectorConfig,
    Metric,
    Outcome,
    SignalTooShortError,
    TraceMismatchError,
    ZeroSignalError,
    ZeroVarianceError,
    apcc,
    detect,
    gate,
    rmse,
    sdr,
    similarity,
)
from signal_model import Trace, synthesize_scenario


def test_apcc_of_identical_traces_is_one(make_sinusoid):
    trace = make_sinusoid()
    assert apcc(trace, trace) == pytest.approx(1.0)


def test_apcc_ignores_sign():
    assert apcc([1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]) == pytest.approx(1.0)


def test_apcc_of_uncorrelated_vectors_is_zero():
    assert apcc([1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0]) == pytest.approx(0.0)


@pytest.mark.parametrize('scale,shift', [(2.0, 0.0), (0.1, 5.0), (-3.0, -1.0)])
def test_apcc_is_affine_invariant(scale, shift):
    rng = np.random.default_rng(3)
    x = rng.standard_normal(200)
    y = 0.7 * x + rng.standard_normal(200)
    assert apcc(x, scale * y + shift) == pytest.approx(apcc(x, y), abs=1e-12)


def test_apcc_rejects_constant_trace():
    with pytest.raises(ZeroVarianceError):
        apcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_apcc_rejects_length_mismatch():
    with pytest.raises(TraceMismatchError):
        apcc([1.0, 2.0, 3.0], [1.0, 2.0])


def test_rmse_examples():
    assert rmse([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert rmse([1.0, -1.0], [0.0, 0.0]) == pytest.approx(1.0)
    assert rmse([3.0, 3.0, 3.0, 3.0], [0.0, 0.0, 0.0, 0.0]) == pytest.approx(3.0)


def test_rmse_is_symmetric_and_satisfies_triangle_inequality():
    rng = np.random.default_rng(11)
    x, y, z = rng.standard_normal((3, 100))
    assert rmse(x, y) == pytest.approx(rmse(y, x))
    assert rmse(x, z) <= rmse(x, y) + rmse(y, z) + 1e-12


def test_rmse_reciprocal_caps_identical_traces(make_sinusoid):
    trace = make_sinusoid()
    assert similarity(Metric.RMSE_RECIP, trace, trace) == SCORE_MAX
    assert similarity('rmse', [1.0, 0.0], [0.0, 0.0]) == pytest.approx(1.0 / np.sqrt(0.5))


@pytest.mark.parametrize('amplitude,expected', [(0.3, True), (0.05, False), (0.0, False)])
def test_gate_uses_population_std(make_sinusoid, amplitude, expected):
    assert gate(make_sinusoid(amplitude=amplitude)) is expected


def test_gate_boundary_is_inclusive():
    samples = np.array([0.5, -0.5] * 50)
    assert gate(samples, 0.5)
    assert not gate(samples, 0.5000001)


def test_detect_accepts_same_body_pair(default_spec):
    traces = synthesize_scenario(default_spec.with_seed(4))
    decision = detect(DetectorConfig(threshold_eta=0.5), traces['authenticator'], traces['valid'])
    assert decision.outcome == Outcome.ACCEPT
    assert decision.accepted
    assert decision.score > 0.9


def test_detect_gates_weak_signal(make_sinusoid):
    strong = make_sinusoid(amplitude=0.3)
    weak = make_sinusoid(amplitude=0.01)
    decision = detect(DetectorConfig(), strong, weak)
    assert decision.outcome == Outcome.REJECT_GATE
    assert decision.score is None
    assert not decision.accepted


def test_detect_gates_constant_trace_with_zero_gate(make_sinusoid):
    flat = Trace(0.0, 500.0, np.full(500, 0.2))
    decision = detect(DetectorConfig(gate_std_volts=0.0), make_sinusoid(), flat)
    assert decision.outcome == Outcome.REJECT_GATE


def test_detect_requires_strictly_greater_score(make_sinusoid):
    trace = make_sinusoid()
    assert detect(DetectorConfig(threshold_eta=1.0), trace, trace).outcome == Outcome.REJECT_SCORE
    assert detect(DetectorConfig(threshold_eta=0.999), trace, trace).outcome == Outcome.ACCEPT


def test_raising_eta_never_turns_reject_into_accept(default_spec):
    traces = synthesize_scenario(default_spec.with_seed(9))
    pair = (traces['authenticator'], traces['invalid'])
    accepted = [detect(DetectorConfig(threshold_eta=eta), *pair).accepted for eta in np.linspace(0, 1, 21)]
    assert accepted == sorted(accepted, reverse=True)


def test_detect_rejects_short_traces(make_sinusoid):
    with pytest.raises(SignalTooShortError):
        detect(DetectorConfig(signal_length_seconds=2.0), make_sinusoid(length=1.0), make_sinusoid(length=3.0))


def test_detect_rejects_other_sample_rates(make_sinusoid):
    with pytest.raises(TraceMismatchError):
        detect(DetectorConfig(), make_sinusoid(sample_rate=1000.0), make_sinusoid(sample_rate=1000.0))


def test_detect_compares_trailing_window(make_sinusoid):
    rng = np.random.default_rng(0)
    tail = make_sinusoid(length=1.0).samples
    s = Trace(0.0, 500.0, np.concatenate([rng.standard_normal(500), tail]))
    s_prime = Trace(0.0, 500.0, np.concatenate([rng.standard_normal(250), tail]))
    decision = detect(DetectorConfig(threshold_eta=0.99), s, s_prime)
    assert decision.outcome == Outcome.ACCEPT
    assert decision.score == pytest.approx(1.0)


def test_detector_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(threshold_eta=-0.1)
    with pytest.raises(ValueError):
        DetectorConfig(signal_length_seconds=0.0)
    with pytest.raises(ValueError):
        DetectorConfig(metric='cosine')
    assert DetectorConfig(metric='rmse').metric is Metric.RMSE_RECIP


def test_sdr_examples():
    assert sdr([1.0, 1.0], [0.0, 0.0]) == pytest.approx(0.0)
    assert sdr([1.0, -1.0, 1.0, -1.0], [0.9, -0.9, 0.9, -0.9]) == pytest.approx(20.0)
    assert sdr([1.0, 2.0], [1.0, 2.0]) == SCORE_MAX


def test_sdr_of_orthogonal_noise_matches_power_ratio(make_sinusoid):
    s = make_sinusoid(amplitude=1.0, length=10.0).samples
    noise = np.random.default_rng(5).standard_normal(len(s))
    noise -= s * np.dot(noise, s) / np.dot(s, s)
    noise *= np.sqrt(np.mean(s * s) / 100.0 / np.mean(noise * noise))
    assert sdr(s, s + noise) == pytest.approx(20.0, abs=1e-9)


def test_sdr_rejects_silent_reference():
    with pytest.raises(ZeroSignalError):
        sdr([0.0, 0.0], [1.0, 0.0])


@pytest.mark.parametrize('offset,low,high', [(0.005, None, 0.01), (-0.005, None, 0.01), (0.010, 0.99, None)])
def test_clock_offset_on_pure_carrier(offset, low, high):
    traces = synthesize_scenario(scenarios.pure_carrier_scenario(offset_seconds=offset).with_seed(1))
    score = apcc(traces['authenticator'], traces['valid'])
    if low is not None:
        assert score > low
    if high is not None:
        assert score < high


def test_contact_detector_rows(default_spec):
    traces = synthesize_scenario(default_spec.with_seed(2))
    detector = ContactDetector(DetectorConfig(threshold_eta=0.5))
    decisions = detector.decide_many([
        (traces['authenticator'], traces['valid']),
        (traces['authenticator'], traces['invalid']),
    ])
    frame = detector.decision_rows(decisions)
    assert list(frame.columns) == ['metric', 'eta', 'length_s', 'outcome', 'score']
    assert len(frame) == 2
    assert frame.loc[0, 'outcome'] == 'ACCEPT'
    assert set(frame['metric']) == {'apcc'}


def test_with_gate_keeps_other_settings():
    cfg = DetectorConfig(threshold_eta=0.4, signal_length_seconds=2.0).with_gate(0.02)
    assert (cfg.gate_std_volts, cfg.threshold_eta, cfg.signal_length_seconds) == (0.02, 0.4, 2.0)


def test_apcc_agrees_with_reference_correlation():
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=200), rng.normal(size=200)
    assert apcc(x, y) == pytest.approx(abs(sp_stats.pearsonr(x, y)[0]), abs=1e-12)


@pytest.mark.slow
def test_metric_properties_over_random_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        n = int(rng.integers(2, 64))
        x, y, z = rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)
        scale = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 10.0)
        shift = rng.uniform(-5.0, 5.0)

        score = apcc(x, y)
        assert 0.0 <= score <= 1.0
        assert score == pytest.approx(abs(sp_stats.pearsonr(x, y)[0]), abs=1e-9)
        assert apcc(y, x) == pytest.approx(score, abs=1e-9)
        assert apcc(scale * x + shift, y) == pytest.approx(score, abs=1e-9)

        assert rmse(x, x) == 0.0
        assert rmse(x, y) >= 0.0
        assert rmse(x, y) == pytest.approx(rmse(y, x), abs=1e-9)
        assert rmse(x, z) <= rmse(x, y) + rmse(y, z) + 1e-9


@pytest.mark.slow
def test_gate_over_many_seeds(make_sinusoid):
    cfg = DetectorConfig(threshold_eta=0.0)
    failures = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        strong = make_sinusoid(amplitude=0.3, phase=float(rng.uniform(0, 2 * np.pi)))
        constant = Trace(0.0, 500.0, np.full(500, rng.uniform(-1.0, 1.0)))
        noise = Trace(0.0, 500.0, rng.normal(0.0, 0.01, 500))
        failures += detect(cfg, strong, constant).outcome != Outcome.REJECT_GATE
        failures += detect(cfg, strong, noise).outcome != Outcome.REJECT_GATE
        failures += detect(cfg, strong, strong).outcome != Outcome.ACCEPT
    assert failures / 3000 < 1e-3
