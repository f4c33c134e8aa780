import hypothesis
import numpy as np
import pytest

from duetsynth.data import DatasetSpec, gen_dataset

hypothesis.settings.register_profile("default", deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    """Two kinds, short clips, moderate grid; shared across test modules."""
    spec = DatasetSpec(
        base_kinds=("hold", "lean"),
        scale_min=0.85,
        scale_max=1.15,
        scale_step=0.05,
        n_frames=16,
        seed=7,
    )
    ds = gen_dataset(spec)
    assert not ds.failures
    return ds


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.line(line)
