import numpy as np
import pytest

from carryover import CarryoverSpec, FixedTau, FrailtySpec, SimConfig, simulate_dataset


def make_data(m=50, tau=5.0, phi=0.3, delta=0.2, beta=0.0, refractory=0.0, seed=0, replicate=0,
              baseline=None, kind="gamma"):
    kw = {} if baseline is None else {"baseline": baseline}
    cfg = SimConfig(m, FixedTau(tau), frailty=FrailtySpec(kind, phi), beta=beta,
                    carryover=CarryoverSpec(delta), refractory=refractory, seed=seed, **kw)
    return simulate_dataset(cfg, replicate=replicate)


@pytest.fixture
def null_data():
    return make_data(m=60, tau=5.0, phi=0.3, seed=11)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
