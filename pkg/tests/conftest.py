import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from qotpipe.params import ProtocolParams
from qotpipe.qsim import ChannelModel

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Desk-scale protocol parameters: one tenth of the default block with the
# total epsilon target relaxed so that 128-bit outputs fit.
DESK = dict(n0=320_000, p_max=0.011, eps_total_target=0.25)


@pytest.fixture
def desk_params() -> ProtocolParams:
    return ProtocolParams(**DESK)


@pytest.fixture
def small_params() -> ProtocolParams:
    """Tiny blocks for fast protocol-flow tests; security margins are meaningless here."""
    return ProtocolParams(n0=60_000, p_max=0.012, delta1=0.005, delta2=0.02, eps_total_target=1.0, n_out=32)


@pytest.fixture
def quiet_channel() -> ChannelModel:
    return ChannelModel.flat(0.0075)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "LINES", None):
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
