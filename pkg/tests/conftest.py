import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from unimoe import tensor as tn
from unimoe.affinity import GateParams
from unimoe.layer import ExpertBank

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return tn.Rng(1234)


def make_instance(seed, T=6, D=3, E=3, H=5, slots=None, noise_std=0.0):
    r = tn.Rng(seed)
    X = r.normal((T, D))
    bank = ExpertBank.init(r, E, D, H, slots)
    gate = GateParams(tn.parameter(r.normal((D, E))), noise_std)
    return X, bank, gate


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
