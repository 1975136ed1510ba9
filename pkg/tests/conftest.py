import numpy as np
import pytest

from predbayes.domain import default_domain
from predbayes.eval import fit_models, generate_dataset
from predbayes.sim import default_tasks


@pytest.fixture(scope="session")
def spec():
    return default_domain()


@pytest.fixture(scope="session")
def small_dataset(spec):
    # 3 episodes per task: enough for every state to appear, cheap to build
    return generate_dataset(spec, default_tasks(), episodes_per_task=3, seed=11)


@pytest.fixture(scope="session")
def small_models(spec, small_dataset):
    train = [t for i, t in enumerate(small_dataset) if i % 3 != 2]
    val = [t for i, t in enumerate(small_dataset) if i % 3 == 2]
    return fit_models(train, val, spec, seed=3, methods=("pred", "state"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_dataset(spec):
    return generate_dataset(spec)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
