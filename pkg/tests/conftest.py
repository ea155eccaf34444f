import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mgf.corpus import SynthSpec, synth_corpus

settings.register_profile("mgf", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mgf")


@pytest.fixture(scope="session")
def small_corpus():
    """8 classes x 2 speakers x 2 utterances of 1 s."""
    return synth_corpus(SynthSpec(class_count=8, speaker_count=2, utterances_per_speaker=2,
                                  utterance_seconds=1.0, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
