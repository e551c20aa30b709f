import numpy as np
import pytest

from tinymetafed.config import ExperimentConfig
from tinymetafed.nn import NetworkSpec


@pytest.fixture
def sine_spec():
    return NetworkSpec.dense((1, 16, 16, 16, 1), "tanh", "mse")


@pytest.fixture
def small_cfg():
    """A sine run short enough for unit tests."""
    return ExperimentConfig(rounds=30, clients=3, seed=7, eval_every=10, eval_repeats=3, timeout=10.0, cooldown=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def layer_tuples(spec):
    return [(l.input_dim, l.output_dim, l.activation.value) for l in spec.layers]


# ---- acceptance report -----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def acceptance(criterion: str, passed: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
