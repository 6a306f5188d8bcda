import numpy as np
import pytest

from tilenerf import dataio, synth
from tilenerf.field import FieldConfig


SMALL_FIELD = FieldConfig(n_levels=4, log2_table_size=10, base_resolution=4, max_resolution=16,
                          density_hidden=16, color_hidden=16, occupancy_resolution=8)

# criterion number -> (passed, detail), filled by the acceptance tests
ACCEPTANCE = {}


def record(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_scene():
    return synth.random_scene(extent_e=32.0, extent_n=32.0, n_train_views=4, seed=3)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_scene):
    root = tmp_path_factory.mktemp("small_dataset")
    synth.generate(small_scene, root, seed=3)
    return dataio.Dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
