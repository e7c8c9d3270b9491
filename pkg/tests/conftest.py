import numpy as np
import pytest

from relightbake.geom import RngStream
from relightbake.scene import load_scene


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture(scope="session")
def spheres():
    return load_scene("spheres")


@pytest.fixture(scope="session")
def occluder_pair():
    return load_scene("occluder-pair")


@pytest.fixture(scope="session")
def cornell():
    return load_scene("cornell-sdf")


def random_unit(rng, n):
    v = rng.uniform((n, 3)) * 2.0 - 1.0
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


# acceptance criteria: details recorded by the tests, outcomes by the hook below
_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def criterion(request):
    """``criterion(ok, detail)`` records one check of the criterion named by the test, then asserts it."""
    num = int(request.node.name.split("_")[2])
    entry = _CRITERIA.setdefault(num, {"details": [], "failed": False})

    def check(ok, detail):
        entry["details"].append(("ok " if ok else "FAILED ") + detail)
        assert ok, detail

    return check


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if name.startswith("test_criterion_"):
        # a fixture error (e.g. training diverged) fails the criterion too
        entry = _CRITERIA.setdefault(int(name.split("_")[2]), {"details": [], "failed": False})
        entry["failed"] |= report.failed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'FAIL' if e['failed'] else 'PASS'}  "
                                    + "; ".join(d for d in e["details"]))
