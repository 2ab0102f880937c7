import numpy as np
import pytest

from bandbridge import synthpipe as sp


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Five 256 x 256 scenes -> 12 / 4 / 4 patches."""
    root = tmp_path_factory.mktemp("data")
    base = sp.SceneSpec(size=256)
    manifest = sp.build_dataset(root, n_scenes=5, ratios=(0.6, 0.2, 0.2), seed=11, base=base)
    return root, manifest


# acceptance verdicts, printed as one line per criterion at the end of the run
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
