import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from msls.audio import build_library
from msls.enclosure import EnclosureConfig, generate_enclosure
from msls.harness import Recognizer, Renderer, train_from_renderer
from msls.recovery import fit_vspca
from msls.spectra import StftConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def stft():
    return StftConfig()


@pytest.fixture(scope="session")
def enclosure(stft):
    return generate_enclosure(EnclosureConfig(seed=0), grid=stft)


@pytest.fixture(scope="session")
def street_renderer(enclosure, stft):
    return Renderer(enclosure, build_library("street"), stft, seed=0)


@pytest.fixture(scope="session")
def street_dictionary(street_renderer):
    return train_from_renderer(street_renderer)


@pytest.fixture(scope="session")
def street_vspca(street_dictionary):
    return fit_vspca(street_dictionary, 0.99)


@pytest.fixture(scope="session")
def street_recognizer(street_dictionary, street_vspca):
    return Recognizer(street_dictionary, street_vspca)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
