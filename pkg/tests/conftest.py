import numpy as np
import pytest

from collabinfer.backbone import SplitModel, pretrain
from collabinfer.scenario import ScenarioCfg, gen_dataset


@pytest.fixture(scope="session")
def scenario():
    return ScenarioCfg()


@pytest.fixture(scope="session")
def dataset(scenario):
    return gen_dataset(scenario)


@pytest.fixture(scope="session")
def backbone(scenario, dataset):
    """Default backbone, pretrained on clean data and frozen."""
    model = SplitModel.build(n_classes=scenario.n_classes, seed=0)
    return pretrain(model, dataset.X_train, dataset.y_train, epochs=6, lr=1e-3,
                    X_val=dataset.X_val, y_val=dataset.y_val, floor=0.95)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
