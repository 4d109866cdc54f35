import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "pmrl",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("pmrl")

# Lines appended by the acceptance tests, echoed once at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def unit_columns(rng: np.random.Generator, *shape: int) -> np.ndarray:
    z = rng.normal(size=shape)
    return z / np.linalg.norm(z, axis=-2, keepdims=True)


def aligned(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    col = unit_columns(rng, d, 1)
    return np.repeat(col, k, axis=1)


def small_config(**overrides) -> dict:
    """A run configuration small enough to train in well under a second."""
    doc = {
        "synthetic": {"n_instances": 24, "n_test": 12, "k": 3, "latent_dim": 3, "obs_dims": [5, 6, 7]},
        "hidden_width": 8,
        "embed_dim": 6,
        "head_hidden": 8,
        "steps": 40,
        "batch_size": 8,
        "eval_interval": 20,
        "figures": False,
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
