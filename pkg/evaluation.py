import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

try:
    from scipy import stats as sp_stats
    SCIPY_AVAILABLE = True
except ImportError:
    SCIPY_AVAILABLE = False
    sp_stats = None

from detector import DetectorConfig, detect, sdr
from signal_model import (
    ROLE_AUTHENTICATOR,
    ROLE_INVALID,
    ROLE_VALID,
    ScenarioSpec,
    derive_seed,
    synthesize_scenario,
)

logger = logging.getLogger(__name__)

DEFAULT_TRIALS = 500
DEFAULT_ALPHA_BOUND = 0.02

ROC_COLUMNS = ['eta', 'alpha', 'beta', 'frr']
BETA_COLUMNS = ['length_s', 'alpha_bound', 'beta']
SDR_COLUMNS = ['pairing', 'mean_sdr_db', 'std_sdr_db']
MIMICRY_COLUMNS = ['length_s', 'eta', 'far']


class ScenarioRoleError(ValueError):
    """Raised when a scenario lacks the placements an experiment needs"""


class EmptyClassError(ValueError):
    """Raised when every trial of a class was gated"""


class NoFeasibleThresholdError(ValueError):
    """Raised when no ROC point satisfies the false-acceptance bound"""


@dataclass(frozen=True)
class TrialTally:
    n_valid: int
    n_invalid: int
    n_true_accept: int
    n_false_accept: int

    def __post_init__(self):
        if not 0 <= self.n_true_accept <= self.n_valid:
            raise ValueError('n_true_accept must lie in [0, n_valid]')
        if not 0 <= self.n_false_accept <= self.n_invalid:
            raise ValueError('n_false_accept must lie in [0, n_invalid]')

    @property
    def beta(self) -> float:
        return self.n_true_accept / self.n_valid if self.n_valid else 0.0

    @property
    def alpha(self) -> float:
        return self.n_false_accept / self.n_invalid if self.n_invalid else 0.0


@dataclass(frozen=True)
class RocPoint:
    eta: float
    alpha: float
    beta: float

    @property
    def frr(self) -> float:
        return 1.0 - self.beta


@dataclass(frozen=True)
class RocCurve:
    points: Tuple[RocPoint, ...]
    trials_per_point: int
    n_invalid: int = 0

    def to_frame(self) -> pd.DataFrame:
        rows = [(p.eta, p.alpha, p.beta, p.frr) for p in self.points]
        return pd.DataFrame(rows, columns=ROC_COLUMNS)


@dataclass
class LabeledScores:
    """Similarity scores per class; gated trials are counted but carry no score"""

    valid_scores: List[float] = field(default_factory=list)
    invalid_scores: List[float] = field(default_factory=list)
    valid_gated: int = 0
    invalid_gated: int = 0
    n_trials: int = 0

    @property
    def n_valid(self) -> int:
        return len(self.valid_scores) + self.valid_gated

    @property
    def n_invalid(self) -> int:
        return len(self.invalid_scores) + self.invalid_gated


def trial_seed(master_seed: int, trial_index: int) -> int:
    return derive_seed(master_seed, trial_index)


def _pairings(scenario: ScenarioSpec):
    authenticators = scenario.placements_with_role(ROLE_AUTHENTICATOR)
    valid = scenario.placements_with_role(ROLE_VALID)
    invalid = scenario.placements_with_role(ROLE_INVALID)
    if not authenticators:
        raise ScenarioRoleError('scenario has no authenticator placement')
    if not valid:
        raise ScenarioRoleError('scenario has no valid authenticatee placement')
    if not invalid:
        raise ScenarioRoleError('scenario has no invalid authenticatee placement')
    return authenticators[0].placement_id, [p.placement_id for p in valid], [p.placement_id for p in invalid]


def _map_trials(func, n_trials: int, workers: int) -> list:
    if workers <= 1:
        return [func(i) for i in range(n_trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, range(n_trials)))


def run_trials(scenario: ScenarioSpec, detector_cfg: DetectorConfig, n_trials: int = DEFAULT_TRIALS,
               seed: int = 0, workers: int = 1) -> LabeledScores:
    """
    Score `n_trials` independent syntheses of the scenario.

    Each trial draws its own seed from (seed, trial index), synthesizes exactly one
    signal length of every placement and scores the first authenticator against
    each valid and each invalid authenticatee.
    """
    if n_trials < 1:
        raise ValueError('n_trials must be >= 1')
    authenticator, valid_ids, invalid_ids = _pairings(scenario)
    base = scenario.with_length(detector_cfg.signal_length_seconds)

    def score_trial(index: int):
        traces = synthesize_scenario(base.with_seed(trial_seed(seed, index)))
        s = traces[authenticator]
        valid = [detect(detector_cfg, s, traces[p]).score for p in valid_ids]
        invalid = [detect(detector_cfg, s, traces[p]).score for p in invalid_ids]
        return valid, invalid

    scores = LabeledScores(n_trials=n_trials)
    for valid, invalid in _map_trials(score_trial, n_trials, workers):
        for score in valid:
            if score is None:
                scores.valid_gated += 1
            else:
                scores.valid_scores.append(score)
        for score in invalid:
            if score is None:
                scores.invalid_gated += 1
            else:
                scores.invalid_scores.append(score)

    logger.info(
        'ran %d trials at %.3g s: %d/%d valid and %d/%d invalid scores gated',
        n_trials, detector_cfg.signal_length_seconds,
        scores.valid_gated, scores.n_valid, scores.invalid_gated, scores.n_invalid,
    )
    return scores


def _count_above(sorted_scores: np.ndarray, eta: float) -> int:
    return int(len(sorted_scores) - np.searchsorted(sorted_scores, eta, side='right'))


def tally(scores: LabeledScores, eta: float) -> TrialTally:
    """Accept counts at threshold `eta`; gated trials always count as rejections"""
    valid = np.sort(np.asarray(scores.valid_scores, dtype=np.float64))
    invalid = np.sort(np.asarray(scores.invalid_scores, dtype=np.float64))
    return TrialTally(
        n_valid=scores.n_valid,
        n_invalid=scores.n_invalid,
        n_true_accept=_count_above(valid, eta),
        n_false_accept=_count_above(invalid, eta),
    )


def default_eta_grid(scores: LabeledScores) -> np.ndarray:
    """Every observed score plus one grid point just below the smallest"""
    observed = np.unique(np.concatenate([
        np.asarray(scores.valid_scores, dtype=np.float64),
        np.asarray(scores.invalid_scores, dtype=np.float64),
    ]))
    below = np.nextafter(observed[0], -np.inf)
    return np.concatenate([[below], observed])


def roc(scores: LabeledScores, eta_grid: Optional[Sequence[float]] = None) -> RocCurve:
    """Empirical ROC: beta and alpha are the fractions of each class scoring strictly above eta"""
    if not scores.valid_scores:
        raise EmptyClassError('no ungated valid trials to build an ROC from')
    if not scores.invalid_scores:
        raise EmptyClassError('no ungated invalid trials to build an ROC from')
    grid = default_eta_grid(scores) if eta_grid is None else np.sort(np.asarray(eta_grid, dtype=np.float64))

    valid = np.sort(np.asarray(scores.valid_scores, dtype=np.float64))
    invalid = np.sort(np.asarray(scores.invalid_scores, dtype=np.float64))
    points = tuple(
        RocPoint(
            eta=float(eta),
            alpha=_count_above(invalid, eta) / scores.n_invalid,
            beta=_count_above(valid, eta) / scores.n_valid,
        )
        for eta in grid
    )
    return RocCurve(points=points, trials_per_point=scores.n_trials, n_invalid=scores.n_invalid)


def alpha_upper_bound(n_false_accept: int, n_invalid: int, confidence: float) -> float:
    """One-sided Clopper-Pearson upper limit on the false-acceptance rate"""
    if not SCIPY_AVAILABLE:
        raise RuntimeError('confidence-bounded thresholds need scipy')
    if not 0 < confidence < 1:
        raise ValueError(f'confidence must lie in (0, 1), got {confidence}')
    if n_invalid < 1 or not 0 <= n_false_accept <= n_invalid:
        raise ValueError('need 0 <= n_false_accept <= n_invalid and n_invalid >= 1')
    if n_false_accept == n_invalid:
        return 1.0
    return float(sp_stats.beta.ppf(confidence, n_false_accept + 1, n_invalid - n_false_accept))


def np_threshold(curve: RocCurve, alpha_bound: float, confidence: Optional[float] = None) -> Tuple[float, float]:
    """
    Threshold with the highest beta whose alpha respects the bound; ties go to the smallest eta.

    With `confidence`, a point is feasible only when the upper confidence limit of
    its alpha respects the bound, so the threshold holds on fresh trials too.
    """
    if not curve.points:
        raise NoFeasibleThresholdError('empty ROC curve')
    if not 0 <= alpha_bound <= 1:
        raise ValueError(f'alpha_bound must lie in [0, 1], got {alpha_bound}')
    if confidence is None:
        feasible = [p for p in curve.points if p.alpha <= alpha_bound]
    else:
        if curve.n_invalid < 1:
            raise ValueError('a confidence bound needs the number of invalid trials behind the curve')
        feasible = [
            p for p in curve.points
            if alpha_upper_bound(int(round(p.alpha * curve.n_invalid)), curve.n_invalid, confidence) <= alpha_bound
        ]
    if not feasible:
        raise NoFeasibleThresholdError(f'no threshold achieves alpha <= {alpha_bound}')
    best = min(feasible, key=lambda p: (-p.beta, p.eta))
    return best.eta, best.beta


def calibrate(scenario: ScenarioSpec, detector_cfg: DetectorConfig, alpha_bound: float,
              n_trials: int = DEFAULT_TRIALS, seed: int = 0, workers: int = 1,
              confidence: Optional[float] = None) -> DetectorConfig:
    """Detector configuration carrying the Neyman-Pearson threshold for `alpha_bound`"""
    curve = roc(run_trials(scenario, detector_cfg, n_trials, seed, workers))
    eta, beta = np_threshold(curve, alpha_bound, confidence)
    logger.info('calibrated eta=%.6g (beta=%.4f) at alpha <= %g', eta, beta, alpha_bound)
    # The grid point below the smallest score may be negative; the detector needs eta >= 0.
    return detector_cfg.with_eta(max(eta, 0.0))


def beta_vs_length(scenario: ScenarioSpec, detector_cfg: DetectorConfig, lengths: Iterable[float],
                   alpha_bound: float = DEFAULT_ALPHA_BOUND, n_trials: int = DEFAULT_TRIALS,
                   seed: int = 0, workers: int = 1) -> pd.DataFrame:
    rows = []
    for length in lengths:
        if length <= 0:
            raise ValueError(f'signal lengths must be positive, got {length}')
        scores = run_trials(scenario, detector_cfg.with_length(length), n_trials, seed, workers)
        _, beta = np_threshold(roc(scores), alpha_bound)
        rows.append((float(length), float(alpha_bound), beta))
    return pd.DataFrame(rows, columns=BETA_COLUMNS)


def sdr_report(scenario: ScenarioSpec, n_trials: int = DEFAULT_TRIALS, seed: int = 0) -> pd.DataFrame:
    """Mean and spread of the SDR of the authenticator against each authenticatee"""
    if n_trials < 1:
        raise ValueError('n_trials must be >= 1')
    authenticator, valid_ids, invalid_ids = _pairings(scenario)
    others = valid_ids + invalid_ids
    values = {p: [] for p in others}
    for index in range(n_trials):
        traces = synthesize_scenario(scenario.with_seed(trial_seed(seed, index)))
        for p in others:
            values[p].append(sdr(traces[authenticator], traces[p]))

    rows = []
    for p in others:
        db = np.asarray(values[p])
        rows.append((f'{authenticator}:{p}', float(np.mean(db)), float(np.std(db))))
    return pd.DataFrame(rows, columns=SDR_COLUMNS)


def mimicry_far(attack_scenario: ScenarioSpec, clean_scenario: ScenarioSpec, detector_cfg: DetectorConfig,
                lengths: Iterable[float], alpha_bound: float = DEFAULT_ALPHA_BOUND,
                reference_length: float = 1.0, n_trials: int = DEFAULT_TRIALS,
                seed: int = 0, workers: int = 1) -> pd.DataFrame:
    """
    Attacker acceptance rate per signal length.

    The threshold is set once on attack-free data at `reference_length`, then held
    fixed while the attacker is measured at every length.
    """
    calibrated = calibrate(clean_scenario, detector_cfg.with_length(reference_length),
                           alpha_bound, n_trials, seed, workers)
    eta = calibrated.threshold_eta
    rows = []
    for length in lengths:
        scores = run_trials(attack_scenario, calibrated.with_length(length), n_trials, seed, workers)
        rows.append((float(length), eta, tally(scores, eta).alpha))
    return pd.DataFrame(rows, columns=MIMICRY_COLUMNS)


def expected_attempts(alpha: float) -> float:
    """Mean number of tries before a random impostor is accepted once"""
    return math.inf if alpha <= 0 else 1.0 / alpha


def roc_by_scenario(named: Iterable[Tuple[str, ScenarioSpec]], detector_cfg: DetectorConfig,
                    n_trials: int = DEFAULT_TRIALS, seed: int = 0, workers: int = 1) -> pd.DataFrame:
    frames = []
    for name, scenario in named:
        frame = roc(run_trials(scenario, detector_cfg, n_trials, seed, workers)).to_frame()
        frame.insert(0, 'scenario', name)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


class ExperimentHarness:
    """Runs the detection experiments for one detector setup and reports pandas tables"""

    def __init__(self, detector_cfg: DetectorConfig, n_trials: int = DEFAULT_TRIALS,
                 seed: int = 0, workers: int = 1):
        if n_trials < 1:
            raise ValueError('n_trials must be >= 1')
        self.detector_cfg = detector_cfg
        self.n_trials = n_trials
        self.seed = seed
        self.workers = max(1, workers)

    def scores(self, scenario: ScenarioSpec) -> LabeledScores:
        return run_trials(scenario, self.detector_cfg, self.n_trials, self.seed, self.workers)

    def roc_curve(self, scenario: ScenarioSpec) -> RocCurve:
        return roc(self.scores(scenario))

    def calibrate(self, scenario: ScenarioSpec, alpha_bound: float,
                  confidence: Optional[float] = None) -> DetectorConfig:
        return calibrate(scenario, self.detector_cfg, alpha_bound, self.n_trials, self.seed, self.workers,
                         confidence)

    def threshold_summary(self, curve: RocCurve, alpha_bounds: Iterable[float]) -> pd.DataFrame:
        """One row per bound: the chosen threshold, its rates and the expected impostor attempts"""
        rows = []
        for bound in alpha_bounds:
            eta, beta = np_threshold(curve, bound)
            alpha = next(p.alpha for p in curve.points if p.eta == eta)
            rows.append({
                'alpha_bound': bound,
                'eta': eta,
                'alpha': alpha,
                'beta': beta,
                'expected_attempts': expected_attempts(alpha),
            })
        return pd.DataFrame(rows, columns=['alpha_bound', 'eta', 'alpha', 'beta', 'expected_attempts'])

    def beta_vs_length(self, scenario: ScenarioSpec, lengths: Iterable[float], alpha_bound: float) -> pd.DataFrame:
        return beta_vs_length(scenario, self.detector_cfg, lengths, alpha_bound,
                              self.n_trials, self.seed, self.workers)

    def sdr_report(self, scenario: ScenarioSpec) -> pd.DataFrame:
        return sdr_report(scenario.with_length(self.detector_cfg.signal_length_seconds), self.n_trials, self.seed)

    def mimicry_far(self, attack: ScenarioSpec, clean: ScenarioSpec, lengths: Iterable[float],
                    alpha_bound: float, reference_length: float = 1.0) -> pd.DataFrame:
        return mimicry_far(attack, clean, self.detector_cfg, lengths, alpha_bound, reference_length,
                           self.n_trials, self.seed, self.workers)

    def roc_by_scenario(self, named: Iterable[Tuple[str, ScenarioSpec]]) -> pd.DataFrame:
        return roc_by_scenario(named, self.detector_cfg, self.n_trials, self.seed, self.workers)
