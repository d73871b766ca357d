import pytest

from mtdml.cli import RunConfig, prepare_data
from mtdml.trainer import train


@pytest.fixture(scope="session")
def trained_mul_dml():
    """Mul-DML trained for the full default budget on the default synthetic set."""
    cfg = RunConfig(strategy="Mul-DML", seed=0)
    tr, va, rng = prepare_data(cfg)
    model, hist = train(cfg.strategy_config(), cfg.model_config(), tr, cfg.optim_config(), rng, val=va)
    return model, hist, tr, va


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
