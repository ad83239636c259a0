import math
import zlib

import numpy as np
import pytest

from npr._backend import available_backends
from npr.geometry import CameraIntrinsics, Pose
from npr.nets import default_bundle

BACKENDS = sorted(available_backends())


@pytest.fixture(scope="session")
def nets():
    return default_bundle(0)


@pytest.fixture
def rng(request):
    # one stream per test so reordering tests does not change their inputs
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))


@pytest.fixture(params=BACKENDS)
def kernels(request):
    return available_backends()[request.param]


@pytest.fixture
def intr224():
    return CameraIntrinsics.from_hfov(224, 224, math.radians(90.0))


def random_pose(rng) -> Pose:
    return Pose(tuple(rng.normal(size=4)), tuple(rng.uniform(-3, 3, 3)))


# -- acceptance report -----------------------------------------------------------------

ACCEPTANCE = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    line = "[%s] #%d %s: %s" % ("PASS" if ok else "FAIL", number, title, detail)
    ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
