import numpy as np
import pytest
from loguru import logger

from cocai import run_calibration
from config_utils import build_config
from synth import SynthConfig, generate


@pytest.fixture(autouse=True)
def _quiet_logs():
    logger.remove()
    yield


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv('COCAI_SEED', raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope='session')
def small_corpus():
    """1000 clean series, 40 steps, 2 coupled channels."""
    return generate(SynthConfig(n_series=1000, T=40, d=2, seed=11))


@pytest.fixture(scope='session')
def small_config():
    return build_config({'channels': 'ch0', 'target_len': 10, 'k_candidates': '4-8', 'seed': 0,
                         'fractions': (0.2, 0.5, 0.2, 0.1)})


@pytest.fixture(scope='session')
def calibrated(small_corpus, small_config):
    """(forecaster, split, conformal_models, anomaly_models) for channel ch0."""
    logger.remove()
    return run_calibration(small_corpus, small_config)
