import numpy as np
import pytest

from cgm.diffusion import DiffusionModel, SdeSchedule, symmetric_preset
from cgm.mlp import MlpSpec, ParamVector, init_params

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


def perturbed_params(spec: MlpSpec, seed: int, scale: float = 0.3) -> ParamVector:
    """Fan-in init plus a random perturbation of every entry, output layer included."""
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    return params.with_values(params.values + scale * rng.standard_normal(len(params)))


def central_difference(f, x: np.ndarray, direction: np.ndarray, step: float = 1e-5) -> float:
    return (f(x + step * direction) - f(x - step * direction)) / (2 * step)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture
def small_model():
    """1-D symmetric mixture, 6 steps, two narrow hidden layers."""
    return DiffusionModel(symmetric_preset(1), SdeSchedule(6), MlpSpec(1, (8, 8), 4))


@pytest.fixture
def small_model_2d():
    return DiffusionModel(symmetric_preset(2), SdeSchedule(5), MlpSpec(2, (6, 5), 4))
