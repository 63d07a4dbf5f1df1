import socket
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (title, [outcomes]); filled by tests marked ``criterion``
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test covers")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    slot = _CRITERIA.setdefault(n, (title, []))
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        slot[1].append((item.name, "pass" if rep.passed else "skip" if rep.skipped else "fail"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA, key=lambda k: (int(str(k).rstrip("ab")), str(k))):
        title, results = _CRITERIA[n]
        status = "PASS" if results and all(r == "pass" for _, r in results) else "FAIL"
        failing = [name for name, r in results if r != "pass"]
        extra = f"  (failing: {', '.join(failing)})" if failing else ""
        tr.write_line(f"criterion {n:>2}: {status}  {title}{extra}")


class _NoSockets:
    """Context manager that makes any socket creation raise."""

    def __enter__(self):
        self._orig = socket.socket.__init__

        def guard(sock, *a, **kw):
            raise AssertionError("network socket opened where none is allowed")

        socket.socket.__init__ = guard
        return self

    def __exit__(self, *exc):
        socket.socket.__init__ = self._orig


@pytest.fixture
def no_sockets():
    return _NoSockets()
