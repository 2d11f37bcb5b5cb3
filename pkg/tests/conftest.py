import numpy as np
import pytest

from splitdp.data import synthetic_dataset
from splitdp.splitnet import ArchitectureSpec, build_model
from splitdp.training import TrainConfig, train_baseline

SMALL_WIDTHS = (8, 8, 16, 16, 32, 32)

_acceptance: list[tuple[str, str]] = []


@pytest.fixture(scope="session")
def small_spec():
    return ArchitectureSpec.from_widths(SMALL_WIDTHS)


@pytest.fixture(scope="session")
def digits():
    return synthetic_dataset(1200, 400, seed=3)


@pytest.fixture(scope="session")
def trained_small(small_spec, digits):
    """Case-1 small model with a random frozen client and a trained remote part."""
    train, _ = digits
    model = build_model(small_spec, 1, seed=11).freeze_local()
    return train_baseline(model, train, TrainConfig(learning_rate=2e-3, batch_size=64,
                                                    epochs=6, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _acceptance.append((name, report.outcome.upper()))
    elif report.when == "setup" and report.failed:
        _acceptance.append((name, "ERROR"))
    elif report.when == "setup" and report.skipped:
        _acceptance.append((name, "SKIPPED"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"{outcome:7s} {name}")
