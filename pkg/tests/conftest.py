import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kgex import calibration  # noqa: E402
from kgex.models import ModelConfig, train  # noqa: E402
from kgex.synthetic import chain_store, write_dataset  # noqa: E402


@pytest.fixture(scope="session")
def toy_store():
    return chain_store(num_valid=20, num_test=10)


@pytest.fixture(scope="session")
def toy_model(toy_store):
    model = train(toy_store, ModelConfig(k=16, eta=10, lr=1e-2, max_epochs=40, batch_size=8, seed=0))
    model.calibrator = calibration.fit(model, toy_store, seed=0)
    return model


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory, toy_store):
    return write_dataset(toy_store, tmp_path_factory.mktemp("data") / "toy")


ACCEPTANCE: list[str] = []


def record(number: int, name: str, passed: bool | None, detail: str) -> None:
    """Log one acceptance line; ``passed=None`` marks a skipped criterion."""
    status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
    line = f"[{status}] AC{number:<2} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("AC")[1].split()[0])):
            terminalreporter.write_line(line)
