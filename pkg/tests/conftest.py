import numpy as np
import pytest

from xaiport.model import ModelSpec, TrainConfig, init_model, make_synthetic_bars, train


@pytest.fixture(scope="session")
def bars500():
    return make_synthetic_bars(500, seed=0)


@pytest.fixture(scope="session")
def trained_bars(bars500):
    model, losses = train(init_model(ModelSpec(seed=0)), bars500, TrainConfig(epochs=10, seed=0))
    return model, losses


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance verdict lines, printed once at the end of the session.
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
