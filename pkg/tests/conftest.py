import numpy as np
import pytest

from dopplerspoof.channel import speed_for_doppler
from dopplerspoof.ofdm_phy import OfdmConfig
from dopplerspoof.spoofer import design_dsf


@pytest.fixture(scope="session")
def cfg():
    return OfdmConfig()


@pytest.fixture(scope="session")
def dsf(cfg):
    return design_dsf(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def speed(cfg, f_d):
    """Speed whose carrier Doppler is ``f_d`` Hz under ``cfg``."""
    return speed_for_doppler(f_d, cfg.f_c)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
