import numpy as np
import pytest
from hypothesis import settings

from synseg.synthetic import eval_items, make_dataset, palette, training_samples
from synseg.training import TrainConfig, train

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")

DESK_STEPS = 200


@pytest.fixture(scope="session")
def desk_data():
    return make_dataset(n_images=8, side=32, seed=0)


@pytest.fixture(scope="session")
def desk_run(desk_data):
    """The 8-image overfit run: 200 full-batch SGD steps with the desk config."""
    import time

    t0 = time.perf_counter()
    result = train(TrainConfig.desk(epochs=DESK_STEPS), training_samples(desk_data))
    result.elapsed = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def desk_eval(desk_data):
    return eval_items(desk_data), palette()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
