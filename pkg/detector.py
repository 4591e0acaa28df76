import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional

import numpy as np
import pandas as pd

from signal_model import DEFAULT_SAMPLE_RATE, Trace

logger = logging.getLogger(__name__)

# Stands in for an infinite score (identical traces) so scores stay ordered and serializable.
SCORE_MAX = 1e12
DEFAULT_GATE_STD = 0.06

DECISION_COLUMNS = ['metric', 'eta', 'length_s', 'outcome', 'score']


class TraceMismatchError(ValueError):
    """Raised when two traces cannot be compared sample for sample"""


class ZeroVarianceError(ValueError):
    """Raised when a constant trace reaches the correlation metric"""


class SignalTooShortError(ValueError):
    """Raised when a trace covers less than the configured signal length"""


class ZeroSignalError(ValueError):
    """Raised when the reference signal of an SDR has no power"""


class Metric(str, Enum):
    APCC = 'apcc'
    RMSE_RECIP = 'rmse'


class Outcome(str, Enum):
    ACCEPT = 'ACCEPT'
    REJECT_GATE = 'REJECT_GATE'
    REJECT_SCORE = 'REJECT_SCORE'


@dataclass(frozen=True)
class DetectorConfig:
    metric: Metric = Metric.APCC
    threshold_eta: float = 0.0
    signal_length_seconds: float = 1.0
    gate_std_volts: float = DEFAULT_GATE_STD
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, 'metric', Metric(self.metric))
        if self.threshold_eta < 0:
            raise ValueError('threshold_eta must be >= 0')
        if self.signal_length_seconds <= 0:
            raise ValueError('signal_length_seconds must be > 0')
        if self.gate_std_volts < 0:
            raise ValueError('gate_std_volts must be >= 0')
        if self.sample_rate <= 0:
            raise ValueError('sample_rate must be > 0')

    @property
    def window_samples(self) -> int:
        return int(round(self.signal_length_seconds * self.sample_rate))

    def with_eta(self, eta: float) -> 'DetectorConfig':
        return DetectorConfig(self.metric, float(eta), self.signal_length_seconds,
                              self.gate_std_volts, self.sample_rate)

    def with_length(self, length_seconds: float) -> 'DetectorConfig':
        return DetectorConfig(self.metric, self.threshold_eta, float(length_seconds),
                              self.gate_std_volts, self.sample_rate)

    def with_gate(self, gate_std_volts: float) -> 'DetectorConfig':
        return DetectorConfig(self.metric, self.threshold_eta, self.signal_length_seconds,
                              float(gate_std_volts), self.sample_rate)


@dataclass(frozen=True)
class Decision:
    outcome: Outcome
    score: Optional[float]
    metric: Metric

    @property
    def accepted(self) -> bool:
        return self.outcome == Outcome.ACCEPT


def _values(trace) -> np.ndarray:
    if isinstance(trace, Trace):
        return trace.samples
    return np.asarray(trace, dtype=np.float64)


def _paired(x, y, minimum: int):
    if isinstance(x, Trace) and isinstance(y, Trace) and x.sample_rate != y.sample_rate:
        raise TraceMismatchError(f'sample rates differ: {x.sample_rate} vs {y.sample_rate}')
    xs, ys = _values(x), _values(y)
    if len(xs) != len(ys):
        raise TraceMismatchError(f'length mismatch: {len(xs)} vs {len(ys)}')
    if len(xs) < minimum:
        raise TraceMismatchError(f'need at least {minimum} samples, got {len(xs)}')
    return xs, ys


def apcc(x, y) -> float:
    """Absolute Pearson correlation coefficient of two equal-length traces"""
    xs, ys = _paired(x, y, 2)
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise ZeroVarianceError('APCC is undefined for a constant trace')
    score = abs(np.corrcoef(xs, ys)[0, 1])
    return float(min(score, 1.0))


def rmse(x, y) -> float:
    xs, ys = _paired(x, y, 1)
    return float(np.sqrt(np.mean((xs - ys) ** 2)))


def similarity(metric: Metric, x, y) -> float:
    metric = Metric(metric)
    if metric == Metric.APCC:
        return apcc(x, y)
    error = rmse(x, y)
    return SCORE_MAX if error == 0 else min(1.0 / error, SCORE_MAX)


def gate(trace, gate_std_volts: float = DEFAULT_GATE_STD) -> bool:
    """True when the trace is strong enough to compare (population std at or above the gate)"""
    return bool(np.std(_values(trace)) >= gate_std_volts)


def detect(cfg: DetectorConfig, s: Trace, s_prime: Trace) -> Decision:
    """
    Decide whether two traces come from the same body.

    The trailing `signal_length_seconds` of each trace are compared. A window that
    fails the signal-strength gate rejects before any score is computed; otherwise
    the pair is accepted when the similarity score is strictly above the threshold.
    """
    for trace in (s, s_prime):
        if trace.sample_rate != cfg.sample_rate:
            raise TraceMismatchError(
                f'trace sampled at {trace.sample_rate} sps, detector expects {cfg.sample_rate}'
            )
    n = cfg.window_samples
    if len(s) < n or len(s_prime) < n:
        raise SignalTooShortError(
            f'need {n} samples ({cfg.signal_length_seconds} s), got {len(s)} and {len(s_prime)}'
        )
    x = s.samples[len(s) - n:]
    y = s_prime.samples[len(s_prime) - n:]

    if not (gate(x, cfg.gate_std_volts) and gate(y, cfg.gate_std_volts)):
        return Decision(Outcome.REJECT_GATE, None, cfg.metric)
    try:
        score = similarity(cfg.metric, x, y)
    except ZeroVarianceError:
        return Decision(Outcome.REJECT_GATE, None, cfg.metric)

    outcome = Outcome.ACCEPT if score > cfg.threshold_eta else Outcome.REJECT_SCORE
    logger.debug('%s score=%.6g eta=%.6g -> %s', cfg.metric.value, score, cfg.threshold_eta, outcome.value)
    return Decision(outcome, score, cfg.metric)


def sdr(s, s_prime) -> float:
    """Signal-to-difference ratio in dB; SCORE_MAX when the traces agree to machine precision"""
    xs, ys = _paired(s, s_prime, 1)
    signal_power = float(np.mean(xs * xs))
    if signal_power == 0:
        raise ZeroSignalError('SDR is undefined for an all-zero reference signal')
    difference_power = float(np.mean((xs - ys) ** 2))
    if difference_power <= np.finfo(np.float64).eps * signal_power:
        return SCORE_MAX
    return 10.0 * math.log10(signal_power / difference_power)


class ContactDetector:
    """Same-body contact detector bound to one configuration"""

    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg

    def decide(self, s: Trace, s_prime: Trace) -> Decision:
        return detect(self.cfg, s, s_prime)

    def decide_many(self, pairs: Iterable) -> List[Decision]:
        return [detect(self.cfg, s, s_prime) for s, s_prime in pairs]

    def decision_rows(self, decisions: Iterable[Decision]) -> pd.DataFrame:
        """Decisions as `metric,eta,length_s,outcome,score` rows"""
        rows = [{
            'metric': d.metric.value,
            'eta': self.cfg.threshold_eta,
            'length_s': self.cfg.signal_length_seconds,
            'outcome': d.outcome.value,
            'score': d.score,
        } for d in decisions]
        return pd.DataFrame(rows, columns=DECISION_COLUMNS)
