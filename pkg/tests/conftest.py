import numpy as np
import pytest

from harqmdp.channel import ChannelModel
from harqmdp.lattice import build_ami_grid, enumerate_states


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid4():
    return build_ami_grid(4.0, 32)


@pytest.fixture(scope="session")
def space_k2(grid4):
    return enumerate_states(2, grid4)


@pytest.fixture
def ch10():
    return ChannelModel(10.0)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record one pass/fail line per acceptance criterion (shown in the terminal summary)."""
    log = request.config.stash.setdefault(_CRITERIA, {})

    def record(key, ok, detail):
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'} | {detail}"
        log[key] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_CRITERIA, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")

    def order(k):
        head = str(k).split(".")[0]
        return (int(head) if head.isdigit() else 99, str(k))

    for key in sorted(log, key=order):
        terminalreporter.write_line(log[key])
