import numpy as np
import pytest
import yaml

from bseries_sde.problems import make_fatigue, make_kubo, make_rigid_body


@pytest.fixture(scope="session")
def rigid_body():
    return make_rigid_body()


@pytest.fixture(scope="session")
def kubo():
    return make_kubo()


@pytest.fixture(scope="session")
def fatigue():
    return make_fatigue()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_states(rng):
    """100 rigid-body states with components in [-1, 1]."""
    return rng.uniform(-1.0, 1.0, size=(100, 3))


@pytest.fixture
def random_steps(rng):
    return rng.uniform(-0.1, 0.1, size=100)


@pytest.fixture
def write_config(tmp_path):
    """Write a config mapping to a YAML file in tmp_path and return its path."""
    def _write(data, name="experiment.yaml"):
        path = tmp_path / name
        with open(path, "w") as f:
            yaml.safe_dump(data, f, sort_keys=False)
        return path
    return _write


@pytest.fixture
def small_ms_config():
    """A quick Kubo mean-square run: closed-form flow reference, four step sizes, few samples."""
    return {
        "problem": {"name": "kubo"},
        "driver": {"lam": 1, "sigma": 0.5, "seed": 11},
        "run": {
            "T": 0.5,
            "step_exponents": [3, 4, 5, 6],
            "samples": 20,
            "mode": "ms",
        },
        "methods": {"names": ["eps1", "rk4"]},
    }
