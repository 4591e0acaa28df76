import numpy as np
import pytest

import scenarios
from detector import DetectorConfig
from evaluation import calibrate
from signal_model import Trace


@pytest.fixture
def default_spec():
    return scenarios.default_scenario()


@pytest.fixture
def pure_spec():
    return scenarios.pure_carrier_scenario()


@pytest.fixture
def make_sinusoid():
    def make(frequency=50.0, amplitude=0.3, length=1.0, sample_rate=500.0, phase=0.0, start_time=0.0):
        t = start_time + np.arange(int(round(length * sample_rate))) / sample_rate
        return Trace(start_time, sample_rate, amplitude * np.sin(2 * np.pi * frequency * t + phase))
    return make


@pytest.fixture(scope='session')
def session_threshold_cfg():
    """Threshold whose false-accept rate stays under 0.02 with 99% confidence"""
    return calibrate(scenarios.default_scenario(), DetectorConfig(), 0.02, n_trials=1000, seed=2024, confidence=0.99)
