import numpy as np
import pytest

from multiatlas.volume import LabelMap, Volume


def make_mask(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), name="object"):
    data = np.asarray(data).astype(np.int32)
    data = (data != 0).astype(np.int32)
    return LabelMap(data, spacing, origin, {0: "background", 1: name})


def ball(shape, center, radius):
    idx = np.indices(shape).astype(float)
    d2 = sum((idx[a] - center[a]) ** 2 for a in range(3))
    return d2 <= radius ** 2


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_volume(rng):
    return Volume(rng.normal(size=(7, 6, 5)), (1.0, 2.0, 0.5), (3.0, -1.0, 2.0))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.line(line)
