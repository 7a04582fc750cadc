import numpy as np
import pytest

from fedqsn.tensor import ModelState


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_state(rng):
    return ModelState({
        "fc0.weight": rng.normal(size=(6, 5)),
        "fc0.bias": rng.normal(size=5),
        "fc1.weight": rng.normal(size=(5, 3)),
        "fc1.bias": rng.normal(size=3),
    })


def random_state(rng, shapes, scale=1.0):
    return ModelState({name: rng.normal(scale=scale, size=shape) for name, shape in shapes.items()})


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
